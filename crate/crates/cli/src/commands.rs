use impact_duality::applications::{self, AppError, CallSpec, ShadowCheckInput, ShadowVerdict, Utility};
use impact_duality::duality::{self, DualCertificate};
use impact_duality::io::{self, IoError};
use impact_duality::market::{validate_assumptions, validate_tree_assumptions, Market, MarketSpec};
use impact_duality::solver::{self, PriceReport, SolverError, SolverOptions};
use impact_duality::strategy::TradeSchedule;
use impact_duality::tree::{tilt_to_martingale, ScenarioTree};
use impact_duality::wealth;
use serde_json::{json, Value};

use crate::output::{Output, Table};
use crate::{Failure, Inputs};

const PRICE_UNITS: &[(&str, &str)] = &[
    ("primal_value", "currency"),
    ("dual_value", "currency"),
    ("gap", "currency"),
    ("scale", "currency"),
    ("oracle_value", "currency"),
    ("strategy", "shares"),
    ("M", "currency"),
    ("alpha", "currency x rho (scaled spread)"),
    ("q_transitions", "probability"),
    ("iterations", "count"),
];

pub fn run(name: &str, inputs: &Inputs) -> Result<Output, Failure> {
    match name {
        "validate" => validate(inputs),
        "wealth" => wealth_cmd(inputs),
        "price" => price(inputs),
        "gap" => gap(inputs),
        "dual-eval" => dual_eval(inputs),
        "dual-search" => dual_search(inputs),
        "call" => call(inputs),
        "tilt" => tilt(inputs),
        "shadow-check" => shadow(inputs),
        other => Err(Failure::input(format!("unknown command {other}"))),
    }
}

fn read(path: &std::path::Path) -> Result<String, Failure> {
    io::read_to_string(path).map_err(Failure::input)
}

fn load_spec(inputs: &Inputs) -> Result<MarketSpec, Failure> {
    io::parse_market_spec(&read(&inputs.market)?).map_err(Failure::input)
}

fn load_tree(inputs: &Inputs, spec: &MarketSpec) -> Result<Option<ScenarioTree>, Failure> {
    if let Some(p) = &inputs.tree {
        let file = io::parse_tree_file(&read(p)?).map_err(Failure::input)?;
        return io::tree_from_file(&file, spec).map(Some).map_err(Failure::input);
    }
    if let Some(p) = &inputs.prices {
        return io::tree_from_price_csv(&read(p)?, spec).map(Some).map_err(Failure::input);
    }
    Ok(None)
}

/// Market on the given tree. The monotonicity requirement on `kappa` is
/// not enforced here; `validate` reports it.
fn load_market(inputs: &Inputs) -> Result<Market, Failure> {
    let spec = load_spec(inputs)?;
    let tree = load_tree(inputs, &spec)?.ok_or_else(|| Failure::input("a --tree or --prices file is required"))?;
    Market::new_unchecked(tree, spec.params()).map_err(Failure::input)
}

fn load_strategy(inputs: &Inputs, tree: &ScenarioTree) -> Result<Option<TradeSchedule>, Failure> {
    match &inputs.strategy {
        Some(p) => io::parse_strategy(&read(p)?, tree).map(Some).map_err(Failure::input),
        None => Ok(None),
    }
}

fn load_payoff(inputs: &Inputs, tree: &ScenarioTree) -> Result<Vec<f64>, Failure> {
    io::parse_payoff(&inputs.payoff, tree, |p| io::read_to_string(std::path::Path::new(p))).map_err(Failure::input)
}

fn options(inputs: &Inputs) -> SolverOptions {
    let mut o = SolverOptions { tol: inputs.tol, ..SolverOptions::default() };
    if let Some(m) = inputs.max_iter {
        o.max_iter = m;
        o.dual_max_iter = m;
    }
    o
}

fn file_order(tree: &ScenarioTree, v: &[f64]) -> Value {
    json!(io::to_file_order(tree, v))
}

fn leaf_ids(tree: &ScenarioTree) -> Vec<usize> {
    tree.leaves().map(|l| tree.ids()[l]).collect()
}

/// Per-node table in file-id order with the tree's own columns first.
fn node_table(tree: &ScenarioTree, extra: &[(&str, &[f64])]) -> Table {
    let mut columns: Vec<String> = ["id", "parent", "t_index", "t", "P"].iter().map(|s| s.to_string()).collect();
    columns.extend(extra.iter().map(|(n, _)| n.to_string()));
    let ids = tree.ids();
    let mut order: Vec<usize> = (0..tree.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    let rows = order
        .into_iter()
        .map(|i| {
            let nd = tree.node(i);
            let mut row = vec![
                json!(ids[i]),
                nd.parent.map_or(Value::Null, |p| json!(ids[p])),
                json!(nd.level),
                json!(tree.grid().times()[nd.level]),
                json!(nd.price),
            ];
            row.extend(extra.iter().map(|(_, v)| json!(v[i])));
            row
        })
        .collect();
    Table { columns, rows }
}

fn solver_failure(e: SolverError, tree: &ScenarioTree) -> Failure {
    match e {
        SolverError::NonConvergence { report } => Failure {
            code: 3,
            message: "solver did not converge within the iteration budget".into(),
            output: Some(Output::new(report_json(tree, &report), PRICE_UNITS)),
        },
        SolverError::InvalidOptions(_) => Failure::input(e),
        other => Failure::domain(other),
    }
}

fn report_json(tree: &ScenarioTree, r: &PriceReport) -> Value {
    json!({
        "primal_value": r.primal_value,
        "dual_value": r.dual_value,
        "gap": r.gap,
        "scale": r.scale,
        "primal_iterations": r.primal_iterations,
        "dual_iterations": r.dual_iterations,
        "primal_converged": r.primal_converged,
        "dual_converged": r.dual_converged,
        "strategy": r.strategy.as_ref().map(|s| io::strategy_to_file(tree, s)),
        "certificate": r.certificate.as_ref().map(|c| io::certificate_to_file(tree, c)),
    })
}

fn report_table(market: &Market, r: &PriceReport) -> Table {
    let tree = market.tree();
    let n = tree.len();
    let mut cols: Vec<(&str, Vec<f64>)> = Vec::new();
    if let Some(s) = &r.strategy {
        cols.push(("buys", s.buys.clone()));
        cols.push(("sells", s.sells.clone()));
        cols.push(("position", s.position_path(tree)));
        if let Ok(st) = wealth::eta_path(market, s) {
            cols.push(("eta", st.eta));
        }
    }
    if let Some(c) = &r.certificate {
        cols.push(("M", c.martingale.clone()));
        cols.push(("B", duality::band_width(market, &c.measure, &c.alpha)));
        cols.push(("alpha", c.alpha.clone()));
        cols.push(("q", c.measure.transitions().to_vec()));
    }
    debug_assert!(cols.iter().all(|(_, v)| v.len() == n));
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(k, v)| (*k, v.as_slice())).collect();
    node_table(tree, &refs)
}

fn validate(inputs: &Inputs) -> Result<Output, Failure> {
    let spec = load_spec(inputs)?;
    let liq = spec.liquidity().map_err(Failure::input)?;
    let grid_report = validate_assumptions(&spec.grid, &liq);
    let tree = load_tree(inputs, &spec)?;
    let tree_report = tree.as_ref().map(validate_tree_assumptions);
    let passed = grid_report.passed && tree_report.as_ref().map_or(true, |r| r.passed);
    let out = Output::new(
        json!({ "passed": passed, "grid": grid_report, "tree": tree_report }),
        &[("depth_over_rho_min", "shares per currency"), ("depth_over_rho_max", "shares per currency"), ("min_relative_kappa_drop", "dimensionless")],
    );
    if passed {
        Ok(out)
    } else {
        Err(Failure { code: 1, message: "assumptions violated".into(), output: Some(out) })
    }
}

fn wealth_cmd(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let s = load_strategy(inputs, tree)?.ok_or_else(|| Failure::input("--strategy is required"))?;
    let liquidates = s.liquidates(tree);
    let breakdown = wealth::lambda_functional(&market, &s).map_err(Failure::domain)?;
    let consistency = if liquidates { Some(wealth::consistency_check(&market, &s).map_err(Failure::domain)?) } else { None };
    let size = 1.0 + breakdown.v0.abs() + breakdown.scenarios.iter().fold(0.0f64, |m, sc| m.max(sc.lambda_t.abs()));
    let consistent = consistency.map(|e| e <= 1e-10 * size);
    let scenarios: Vec<Value> = leaf_ids(tree)
        .into_iter()
        .zip(&breakdown.scenarios)
        .map(|(id, sc)| {
            json!({
                "leaf_id": id,
                "xi_t": sc.xi_t,
                "lambda_t": sc.lambda_t,
                "p_integral": sc.p_integral,
                "eta_penalty": sc.eta_penalty,
                "terminal_position": sc.terminal_position,
                "decomposed_cash": if liquidates { json!(breakdown.v0 - sc.lambda_t) } else { Value::Null },
            })
        })
        .collect();
    let st = wealth::eta_path(&market, &s).map_err(Failure::domain)?;
    let pos = s.position_path(tree);
    let table = node_table(
        tree,
        &[("buys", &s.buys), ("sells", &s.sells), ("position", &pos), ("eta", &st.eta), ("zeta", &st.zeta)],
    );
    let out = Output::new(
        json!({
            "v0": breakdown.v0,
            "liquidates": liquidates,
            "consistency_error": consistency,
            "consistent": consistent,
            "scenarios": scenarios,
        }),
        &[
            ("v0", "currency"),
            ("xi_t", "currency"),
            ("lambda_t", "currency"),
            ("p_integral", "currency"),
            ("eta_penalty", "currency"),
            ("decomposed_cash", "currency"),
            ("consistency_error", "currency"),
            ("terminal_position", "shares"),
        ],
    )
    .with_table(table);
    if inputs.require_liquidation && !liquidates {
        let k = s.check_terminal_zero(tree).iter().position(|ok| !ok).unwrap_or(0);
        let leaf = tree.leaves().start + k;
        return Err(Failure {
            code: 1,
            message: format!("position at leaf id {} is {}, not zero", tree.ids()[leaf], pos[leaf]),
            output: Some(out),
        });
    }
    Ok(out)
}

fn price(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let payoff = load_payoff(inputs, tree)?;
    let report = solver::primal_solve(&market, &payoff, &options(inputs)).map_err(|e| solver_failure(e, tree))?;
    let mut result = report_json(tree, &report);
    if let Some(step) = inputs.trade_grid {
        if !(step > 0.0) || !(inputs.trade_range >= 0.0) {
            return Err(Failure::input("--trade-grid and --trade-range must be positive"));
        }
        let k = (inputs.trade_range / step).floor() as i64;
        let grid: Vec<f64> = (-k..=k).map(|j| j as f64 * step).collect();
        result["oracle"] = match solver::brute_force_oracle(&market, &payoff, &grid) {
            Ok(v) => json!({ "oracle_value": v, "grid_step": step, "grid_points": grid.len() }),
            Err(e) => json!({ "error": e.to_string() }),
        };
    }
    Ok(Output::new(result, PRICE_UNITS).with_table(report_table(&market, &report)))
}

fn gap(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let payoff = load_payoff(inputs, tree)?;
    let report = solver::gap_report(&market, &payoff, &options(inputs)).map_err(|e| solver_failure(e, tree))?;
    Ok(Output::new(report_json(tree, &report), PRICE_UNITS).with_table(report_table(&market, &report)))
}

fn load_certificate(inputs: &Inputs, tree: &ScenarioTree) -> Result<Option<DualCertificate>, Failure> {
    match &inputs.certificate {
        Some(p) => io::parse_certificate(&read(p)?, tree).map(Some).map_err(Failure::input),
        None => Ok(None),
    }
}

fn dual_eval(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let cert = load_certificate(inputs, tree)?.ok_or_else(|| Failure::input("--certificate is required"))?;
    let payoff = load_payoff(inputs, tree)?;
    let feas = duality::check_feasibility(&market, &cert).map_err(Failure::input)?;
    let value = duality::dual_objective(&market, &cert, &payoff).map_err(Failure::input)?;
    let mut result = json!({
        "feasible": feas.feasible,
        "worst_violation": feas.worst_violation,
        "worst_node_id": tree.ids()[feas.worst_node],
        "tolerance": feas.tolerance,
        "martingale_defect": feas.martingale.max_defect,
        "dual_value": value.value,
        "expected_payoff": value.expected_payoff,
        "alpha_norm_sq": value.alpha_norm_sq,
        "m0": value.m0,
        "B": file_order(tree, &feas.bound),
    });
    let mut cols: Vec<(&str, Vec<f64>)> = vec![
        ("M", cert.martingale.clone()),
        ("B", feas.bound.clone()),
        ("alpha", cert.alpha.clone()),
        ("q", cert.measure.transitions().to_vec()),
    ];
    if let Some(s) = load_strategy(inputs, tree)? {
        if s.x0 != market.params().x0 {
            return Err(Failure::input("strategy x0 differs from the market file"));
        }
        let xi0 = solver::required_cash(&market, &s, &payoff).map_err(Failure::domain)?;
        if feas.feasible {
            let wd = duality::weak_duality_check(&market, &s, xi0, &cert, &payoff).map_err(Failure::domain)?;
            result["weak_duality"] = json!({
                "primal_cash": wd.primal_cash,
                "margin": wd.margin,
                "superreplication_slack": wd.superreplication_slack,
                "band_slack": wd.band_slack,
                "eta_alpha_slack": wd.eta_alpha_slack,
                "tolerance": wd.tolerance,
            });
        }
        cols.push(("eta", wealth::eta_path(&market, &s).map_err(Failure::domain)?.eta));
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(k, v)| (*k, v.as_slice())).collect();
    let out = Output::new(
        result,
        &[
            ("dual_value", "currency"),
            ("expected_payoff", "currency"),
            ("alpha_norm_sq", "currency"),
            ("m0", "currency"),
            ("B", "currency"),
            ("worst_violation", "currency"),
            ("tolerance", "currency"),
            ("martingale_defect", "currency"),
            ("margin", "currency"),
        ],
    )
    .with_table(node_table(tree, &refs));
    if feas.feasible {
        Ok(out)
    } else {
        Err(Failure { code: 1, message: "certificate is infeasible".into(), output: Some(out) })
    }
}

fn dual_search(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let payoff = load_payoff(inputs, tree)?;
    let init = match load_certificate(inputs, tree)? {
        Some(c) => c,
        None => DualCertificate::running_max(&market, tree.reference_measure()),
    };
    let report = solver::dual_ascent(&market, &payoff, &init, &options(inputs)).map_err(|e| solver_failure(e, tree))?;
    Ok(Output::new(report_json(tree, &report), PRICE_UNITS).with_table(report_table(&market, &report)))
}

fn call(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let spec = CallSpec::new(inputs.strike).map_err(Failure::input)?;
    let check = applications::verify_call_superreplication(&market, spec).map_err(|e| match e {
        AppError::NotApplicable(_) => Failure::domain(e),
        other => Failure::input(other),
    })?;
    let size = 1.0 + check.closed_form.abs() + tree.sup_abs_price();
    let leaves: Vec<Value> = leaf_ids(tree)
        .into_iter()
        .zip(check.terminal_price.iter().zip(&check.terminal_cash))
        .map(|(id, (p, c))| json!({ "leaf_id": id, "P_T": p, "xi_t": c }))
        .collect();
    let payoff = spec.payoff(tree);
    let (tree_primal, converged) = match solver::primal_solve(&market, &payoff, &options(inputs)) {
        Ok(r) => (r.primal_value, true),
        Err(SolverError::NonConvergence { report }) => (report.primal_value, false),
        Err(e) => return Err(Failure::domain(e)),
    };
    let out = Output::new(
        json!({
            "closed_form": check.closed_form,
            "strike": check.strike,
            "max_abs_error": check.max_abs_error,
            "identity_holds": check.max_abs_error <= 1e-10 * size,
            "dominates_payoff": check.dominates_payoff,
            "leaves": leaves,
            "tree_primal": tree_primal,
            "tree_primal_converged": converged,
        }),
        &[
            ("closed_form", "currency"),
            ("strike", "currency"),
            ("max_abs_error", "currency"),
            ("P_T", "currency"),
            ("xi_t", "currency"),
            ("tree_primal", "currency"),
        ],
    );
    Ok(out)
}

fn tilt(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let g = inputs.g.clone().unwrap_or_else(|| vec![0.0; tree.depth() + 1]);
    let res = tilt_to_martingale(tree, &g, inputs.eps).map_err(Failure::domain)?;
    let shifted: Vec<f64> = (0..tree.len()).map(|i| tree.node(i).price + g[tree.node(i).level]).collect();
    let table = node_table(
        tree,
        &[("P_plus_g", &shifted), ("M", &res.martingale), ("q", res.measure.transitions())],
    );
    Ok(Output::new(
        json!({
            "closeness": res.closeness,
            "tail_probability": res.tail_probability,
            "eps": inputs.eps,
            "q_transitions": file_order(tree, res.measure.transitions()),
            "M": file_order(tree, &res.martingale),
        }),
        &[("closeness", "currency"), ("tail_probability", "probability"), ("eps", "currency"), ("q_transitions", "probability"), ("M", "currency")],
    )
    .with_table(table))
}

fn parse_utility(s: &str) -> Result<Utility, Failure> {
    let bad = || Failure::input(format!("bad utility {s:?}; expected exp:A, power:P or log"));
    let u = if s == "log" {
        Utility::Log
    } else if let Some(a) = s.strip_prefix("exp:") {
        Utility::Exponential { a: a.parse().map_err(|_| bad())? }
    } else if let Some(p) = s.strip_prefix("power:") {
        Utility::Power { p: p.parse().map_err(|_| bad())? }
    } else {
        return Err(bad());
    };
    u.validate().map_err(Failure::input)?;
    Ok(u)
}

fn shadow(inputs: &Inputs) -> Result<Output, Failure> {
    let market = load_market(inputs)?;
    let tree = market.tree();
    let schedule = load_strategy(inputs, tree)?.ok_or_else(|| Failure::input("--strategy is required"))?;
    let utility = parse_utility(&inputs.utility)?;
    let martingale = match &inputs.martingale {
        Some(p) => {
            let raw: Vec<f64> = serde_json::from_str(&read(p)?).map_err(|e| Failure::input(IoError::Format(e.to_string())))?;
            Some(io::from_file_order(tree, &raw, "martingale").map_err(Failure::input)?)
        }
        None => None,
    };
    let rep = applications::shadow_price_check(&market, &ShadowCheckInput { schedule, utility, martingale })
        .map_err(Failure::domain)?;
    let mut cols: Vec<(&str, Vec<f64>)> = vec![
        ("lambda", rep.lambda.clone()),
        ("alpha", rep.alpha.clone()),
        ("q", rep.measure.transitions().to_vec()),
        ("martingale_defect", rep.martingale_defect.clone()),
        ("band_slack", rep.band_slack.clone()),
        ("flat_off_residual", rep.flat_off_residual.clone()),
    ];
    if let Some(m) = &rep.martingale {
        cols.insert(0, ("M", m.clone()));
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(k, v)| (*k, v.as_slice())).collect();
    Ok(Output::new(
        json!({
            "verdict": match rep.verdict { ShadowVerdict::Optimal => "optimal", ShadowVerdict::Inconclusive => "inconclusive" },
            "reasons": rep.reasons,
            "searched": rep.searched,
            "tolerance": rep.tolerance,
            "terminal_cash": leaf_ids(tree).into_iter().zip(&rep.terminal_cash).map(|(id, c)| json!({"leaf_id": id, "xi_t": c})).collect::<Vec<_>>(),
            "q_transitions": file_order(tree, rep.measure.transitions()),
            "alpha": file_order(tree, &rep.alpha),
            "lambda": file_order(tree, &rep.lambda),
            "M": rep.martingale.as_ref().map(|m| file_order(tree, m)),
            "martingale_defect": file_order(tree, &rep.martingale_defect),
            "band_slack": file_order(tree, &rep.band_slack),
            "flat_off_residual": file_order(tree, &rep.flat_off_residual),
        }),
        &[
            ("xi_t", "currency"),
            ("lambda", "currency"),
            ("alpha", "currency x rho (scaled spread)"),
            ("M", "currency"),
            ("q_transitions", "probability"),
            ("martingale_defect", "currency"),
            ("band_slack", "currency"),
            ("flat_off_residual", "currency"),
            ("tolerance", "currency"),
        ],
    )
    .with_table(node_table(tree, &refs)))
}
