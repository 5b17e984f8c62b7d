use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

const LN2: &str = "0.6931471805599453";

struct Run {
    code: i32,
    stdout: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", self.stdout))
    }
}

fn run(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_impact-duality")).args(args).output().unwrap();
    Run { code: out.status.code().unwrap_or(-1), stdout: String::from_utf8(out.stdout).unwrap() }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BINARY_TREE: &str = r#"{"levels": 2, "nodes": [
  {"id": 0, "parent": null, "t_index": 0, "P": 100},
  {"id": 1, "parent": 0, "t_index": 1, "p_transition": 0.5, "P": 110},
  {"id": 2, "parent": 0, "t_index": 1, "p_transition": 0.5, "P": 90}]}"#;

#[test]
fn validate_exit_codes() {
    let d = TempDir::new().unwrap();
    let ok = write(d.path(), "ok.json", r#"{"grid": [0, 0.5, 1], "delta": 10, "r": 1}"#);
    assert_eq!(run(&["validate", "--market", s(&ok)]).code, 0);

    let flat = write(d.path(), "flat.json", r#"{"grid": [0, 0.5, 1], "delta": 10, "r": 0}"#);
    let r = run(&["validate", "--market", s(&flat)]);
    assert_eq!(r.code, 1);
    let v = r.json();
    assert_eq!(v["result"]["passed"], false);
    assert!(!v["result"]["grid"]["violations"].as_array().unwrap().is_empty());

    let bad = write(d.path(), "bad.json", "{\"grid\": [0, 1], ");
    assert_eq!(run(&["validate", "--market", s(&bad)]).code, 2);
    assert_eq!(run(&["validate", "--market", "/nonexistent/market.json"]).code, 2);
}

#[test]
fn wealth_round_trip_and_idle() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", &format!(r#"{{"grid": [0, 1], "delta": 10, "r": {LN2}}}"#));
    let prices = write(d.path(), "p.csv", "P\n100\n100\n");
    let rt = write(d.path(), "rt.json", r#"{"buys": [1, 0], "sells": [0, 1], "x0": 0}"#);
    let r = run(&["wealth", "--market", s(&market), "--prices", s(&prices), "--strategy", s(&rt)]);
    assert_eq!(r.code, 0);
    let v = r.json();
    let xi = v["result"]["scenarios"][0]["xi_t"].as_f64().unwrap();
    assert!((xi + 0.15).abs() < 1e-12, "{xi}");
    assert_eq!(v["result"]["consistent"], true);
    assert_eq!(v["units"]["xi_t"], "currency");

    let market = write(d.path(), "m2.json", &format!(r#"{{"grid": [0, 1], "delta": 10, "r": {LN2}, "xi0": 3.5}}"#));
    let idle = write(d.path(), "idle.json", r#"{"buys": [0, 0], "sells": [0, 0], "x0": 0}"#);
    let v = run(&["wealth", "--market", s(&market), "--prices", s(&prices), "--strategy", s(&idle)]).json();
    assert!((v["result"]["scenarios"][0]["xi_t"].as_f64().unwrap() - 3.5).abs() < 1e-12);

    let hold = write(d.path(), "hold.json", r#"{"buys": [1, 0], "sells": [0, 0], "x0": 0}"#);
    let args = ["wealth", "--market", s(&market), "--prices", s(&prices), "--strategy", s(&hold)];
    assert_eq!(run(&args).code, 0);
    let mut strict = args.to_vec();
    strict.push("--require-liquidation");
    assert_eq!(run(&strict).code, 1);
}

#[test]
fn price_and_gap_on_binary_call() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": 10, "r": 0}"#);
    let tree = write(d.path(), "t.json", BINARY_TREE);
    let r = run(&["price", "--market", s(&market), "--tree", s(&tree), "--payoff", "call:100", "--trade-grid", "0.01", "--trade-range", "1"]);
    assert_eq!(r.code, 0);
    let v = r.json();
    let p = v["result"]["primal_value"].as_f64().unwrap();
    assert!((p - 5.05).abs() < 1e-4, "{p}");
    let o = v["result"]["oracle"]["oracle_value"].as_f64().unwrap();
    assert!((o - p).abs() <= 0.01);

    let g = run(&["gap", "--market", s(&market), "--tree", s(&tree), "--payoff", "call:100"]).json();
    let gap = g["result"]["gap"].as_f64().unwrap();
    assert!((-1e-9..=0.05).contains(&gap));
    assert!(g["result"]["dual_value"].as_f64().unwrap() >= 5.0);
}

#[test]
fn starved_solver_exits_three_with_report() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": 10, "r": 0}"#);
    let tree = write(d.path(), "t.json", BINARY_TREE);
    let r = run(&["price", "--market", s(&market), "--tree", s(&tree), "--payoff", "call:100", "--max-iter", "2"]);
    assert_eq!(r.code, 3);
    assert_eq!(r.json()["result"]["primal_converged"], false);
}

#[test]
fn gap_output_is_deterministic() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": 10, "r": 0}"#);
    let tree = write(d.path(), "t.json", BINARY_TREE);
    let args = ["gap", "--market", s(&market), "--tree", s(&tree), "--payoff", "call:100"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
    let mut csv = args.to_vec();
    csv.extend(["--format", "csv"]);
    let a = run(&csv).stdout;
    assert_eq!(a, run(&csv).stdout);
    assert!(a.starts_with("id,parent,t_index,t,P,"));
    assert!(a.lines().next().unwrap().contains(",M,B,alpha"));
}

#[test]
fn call_closed_form() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": 10, "r": 0}"#);
    let prices = write(d.path(), "p.csv", "100\n97.3\n");
    let r = run(&["call", "--market", s(&market), "--prices", s(&prices), "--strike", "95"]);
    assert_eq!(r.code, 0);
    let v = r.json();
    assert!((v["result"]["closed_form"].as_f64().unwrap() - 100.2).abs() < 1e-12);
    assert_eq!(v["result"]["identity_holds"], true);
    assert!((v["result"]["leaves"][0]["xi_t"].as_f64().unwrap() - 97.3).abs() < 1e-10);

    let over = write(d.path(), "over.json", r#"{"grid": [0, 1], "delta": 10, "r": 0, "x0": 2}"#);
    assert_eq!(run(&["call", "--market", s(&over), "--prices", s(&prices)]).code, 1);
}

#[test]
fn fixed_spread_certificate() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": [10, 8], "r": 0, "zeta0": 0.3}"#);
    let tree = write(d.path(), "t.json", BINARY_TREE);
    let cert = write(
        d.path(),
        "c.json",
        r#"{"q_transitions": [1, 0.5, 0.5], "M": [100, 110, 90], "alpha": [0.3, 0.3, 0.3]}"#,
    );
    let r = run(&["dual-eval", "--market", s(&market), "--tree", s(&tree), "--certificate", s(&cert)]);
    assert_eq!(r.code, 0);
    let v = r.json();
    assert_eq!(v["result"]["feasible"], true);
    for b in v["result"]["B"].as_array().unwrap() {
        assert!((b.as_f64().unwrap() - 0.3).abs() < 1e-12);
    }

    let off = write(d.path(), "off.json", r#"{"q_transitions": [1, 0.5, 0.5], "M": [101, 111, 91], "alpha": [0.3, 0.3, 0.3]}"#);
    assert_eq!(run(&["dual-eval", "--market", s(&market), "--tree", s(&tree), "--certificate", s(&off)]).code, 1);
}

#[test]
fn tilt_one_step_example() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": 10, "r": 1}"#);
    let tree = write(
        d.path(),
        "t.json",
        r#"{"levels": 2, "nodes": [
          {"id": 0, "parent": null, "t_index": 0, "P": 100},
          {"id": 1, "parent": 0, "t_index": 1, "p_transition": 0.2, "P": 90},
          {"id": 2, "parent": 0, "t_index": 1, "p_transition": 0.5, "P": 105},
          {"id": 3, "parent": 0, "t_index": 1, "p_transition": 0.3, "P": 120}]}"#,
    );
    let v = run(&["tilt", "--market", s(&market), "--tree", s(&tree), "--g", "1,0", "--eps", "100"]).json();
    let q: Vec<f64> = v["result"]["q_transitions"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((q[1] - 19.0 / 30.0).abs() < 1e-15 && q[2] == 0.0 && (q[3] - 11.0 / 30.0).abs() < 1e-15);
    assert!(v["result"]["closeness"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn shadow_check_idle_on_martingale() {
    let d = TempDir::new().unwrap();
    let market = write(d.path(), "m.json", r#"{"grid": [0, 1], "delta": 10, "r": 0, "zeta0": 0.5, "xi0": 1}"#);
    let tree = write(d.path(), "t.json", BINARY_TREE);
    let idle = write(d.path(), "idle.json", r#"{"buys": [0, 0, 0], "sells": [0, 0, 0], "x0": 0}"#);
    let r = run(&["shadow-check", "--market", s(&market), "--tree", s(&tree), "--strategy", s(&idle), "--utility", "log"]);
    assert_eq!(r.code, 0);
    assert_eq!(r.json()["result"]["verdict"], "optimal");
    let r = run(&["shadow-check", "--market", s(&market), "--tree", s(&tree), "--strategy", s(&idle), "--utility", "power:2"]);
    assert_eq!(r.code, 2);
}
