//! File formats.
//!
//! Trees are read from `{"levels": N+1, "nodes": [{id, parent, t_index,
//! p_transition, P, delta, r}]}` where ids form a permutation of
//! `0..n`. Missing `delta` or `r` are taken from the market file at the
//! node's grid point. Internally nodes are laid out level by level, so
//! every node-indexed array read from or written to a file goes through
//! [`ScenarioTree::ids`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::applications::CallSpec;
use crate::duality::DualCertificate;
use crate::market::{MarketError, MarketSpec};
use crate::strategy::{StrategyError, TradeSchedule};
use crate::tree::{NodeMeasure, ScenarioTree, TreeBuilder, TreeError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },
    #[error("price csv: {0}")]
    Csv(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Read { path: path.display().to_string(), source })
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, context: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|source| IoError::Json { context: context.to_string(), source })
}

pub fn parse_market_spec(text: &str) -> Result<MarketSpec, IoError> {
    let spec: MarketSpec = parse_json(text, "market file")?;
    spec.liquidity()?;
    spec.params().validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFileNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub t_index: usize,
    #[serde(default = "one")]
    pub p_transition: f64,
    #[serde(rename = "P")]
    pub price: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub levels: usize,
    pub nodes: Vec<TreeFileNode>,
}

pub fn parse_tree_file(text: &str) -> Result<TreeFile, IoError> {
    parse_json(text, "tree file")
}

/// Builds a tree on the market file's grid.
pub fn tree_from_file(file: &TreeFile, spec: &MarketSpec) -> Result<ScenarioTree, IoError> {
    let grid = spec.grid.clone();
    if file.levels != grid.len() {
        return Err(TreeError::GridMismatch { depth: file.levels.saturating_sub(1), points: grid.len() }.into());
    }
    let n = file.nodes.len();
    let mut by_id: Vec<Option<&TreeFileNode>> = vec![None; n];
    for nd in &file.nodes {
        if nd.id >= n || by_id[nd.id].is_some() {
            return Err(TreeError::BadIds(n).into());
        }
        by_id[nd.id] = Some(nd);
    }
    let liq = spec.liquidity()?;
    let mut b = TreeBuilder::new(grid.clone());
    // inserting in id order makes builder ids equal file ids
    for nd in by_id.into_iter().map(|x| x.expect("ids checked")) {
        if nd.t_index >= grid.len() {
            return Err(TreeError::LevelMismatch { node: nd.id, given: nd.t_index, expected: grid.len() - 1 }.into());
        }
        let delta = nd.delta.unwrap_or(liq.delta[nd.t_index]);
        let r = nd.r.unwrap_or(liq.r[nd.t_index]);
        match nd.parent {
            None => b.root(nd.price, delta, r),
            Some(p) => b.child(p, nd.p_transition, nd.price, delta, r),
        };
    }
    let tree = b.build()?;
    for i in 0..tree.len() {
        let nd = &file.nodes.iter().find(|x| x.id == tree.ids()[i]).expect("id present");
        if nd.t_index != tree.node(i).level {
            return Err(TreeError::LevelMismatch { node: nd.id, given: nd.t_index, expected: tree.node(i).level }.into());
        }
    }
    Ok(tree)
}

pub fn tree_to_file(tree: &ScenarioTree) -> TreeFile {
    let ids = tree.ids();
    let mut nodes: Vec<TreeFileNode> = (0..tree.len())
        .map(|i| {
            let nd = tree.node(i);
            TreeFileNode {
                id: ids[i],
                parent: nd.parent.map(|p| ids[p]),
                t_index: nd.level,
                p_transition: nd.prob,
                price: nd.price,
                delta: Some(nd.delta),
                r: Some(nd.r),
            }
        })
        .collect();
    nodes.sort_by_key(|n| n.id);
    TreeFile { levels: tree.depth() + 1, nodes }
}

/// Price paths, one column per scenario and one row per grid point. A
/// header row is skipped when present. One column gives a single-path
/// tree, several columns a fan from the common initial price.
pub fn tree_from_price_csv(text: &str, spec: &MarketSpec) -> Result<ScenarioTree, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| IoError::Csv(e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(IoError::Csv(format!("row {}: {e}", k + 1))),
        }
    }
    let n = spec.grid.len();
    if rows.len() != n {
        return Err(IoError::Csv(format!("{} rows, grid has {n} points", rows.len())));
    }
    let width = rows[0].len();
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(IoError::Csv("rows have different numbers of columns".into()));
    }
    let paths: Vec<Vec<f64>> = (0..width).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
    let liq = spec.liquidity()?;
    let tree = if width == 1 {
        ScenarioTree::path(spec.grid.clone(), &paths[0], &liq.delta, &liq.r)?
    } else {
        ScenarioTree::fan(spec.grid.clone(), &paths, &liq.delta, &liq.r)?
    };
    Ok(tree)
}

/// Reorders a file-indexed array into the tree's layout.
pub fn from_file_order(tree: &ScenarioTree, values: &[f64], field: &str) -> Result<Vec<f64>, IoError> {
    if values.len() != tree.len() {
        return Err(IoError::Format(format!("{field} has {} entries, tree has {} nodes", values.len(), tree.len())));
    }
    Ok(tree.ids().iter().map(|&id| values[id]).collect())
}

/// Reorders an array in the tree's layout into file order.
pub fn to_file_order(tree: &ScenarioTree, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (i, &id) in tree.ids().iter().enumerate() {
        out[id] = values[i];
    }
    out
}

pub fn parse_strategy(text: &str, tree: &ScenarioTree) -> Result<TradeSchedule, IoError> {
    let raw: TradeSchedule = parse_json(text, "strategy file")?;
    let s = TradeSchedule::new(from_file_order(tree, &raw.buys, "buys")?, from_file_order(tree, &raw.sells, "sells")?, raw.x0)?;
    Ok(s)
}

pub fn strategy_to_file(tree: &ScenarioTree, s: &TradeSchedule) -> TradeSchedule {
    TradeSchedule { buys: to_file_order(tree, &s.buys), sells: to_file_order(tree, &s.sells), x0: s.x0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub q_transitions: Vec<f64>,
    #[serde(rename = "M")]
    pub martingale: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn parse_certificate(text: &str, tree: &ScenarioTree) -> Result<DualCertificate, IoError> {
    let raw: CertificateFile = parse_json(text, "certificate file")?;
    let measure = NodeMeasure::new(tree, from_file_order(tree, &raw.q_transitions, "q_transitions")?)?;
    Ok(DualCertificate {
        measure,
        martingale: from_file_order(tree, &raw.martingale, "M")?,
        alpha: from_file_order(tree, &raw.alpha, "alpha")?,
    })
}

pub fn certificate_to_file(tree: &ScenarioTree, cert: &DualCertificate) -> CertificateFile {
    CertificateFile {
        q_transitions: to_file_order(tree, cert.measure.transitions()),
        martingale: to_file_order(tree, &cert.martingale),
        alpha: to_file_order(tree, &cert.alpha),
    }
}

/// Payoff per leaf from `call:K`, `const:C`, `zero`, or a JSON object
/// mapping leaf ids to values (read through `load`).
pub fn parse_payoff(
    arg: &str,
    tree: &ScenarioTree,
    load: impl FnOnce(&str) -> Result<String, IoError>,
) -> Result<Vec<f64>, IoError> {
    let bad = |m: String| IoError::Format(m);
    if arg == "zero" {
        return Ok(vec![0.0; tree.n_leaves()]);
    }
    if let Some(k) = arg.strip_prefix("call:") {
        let k: f64 = k.parse().map_err(|_| bad(format!("bad strike in {arg:?}")))?;
        let call = CallSpec::new(k).map_err(|e| bad(e.to_string()))?;
        return Ok(call.payoff(tree));
    }
    if let Some(c) = arg.strip_prefix("const:") {
        let c: f64 = c.parse().map_err(|_| bad(format!("bad constant in {arg:?}")))?;
        return Ok(vec![c; tree.n_leaves()]);
    }
    let text = load(arg)?;
    let map: BTreeMap<String, f64> = parse_json(&text, "payoff file")?;
    let ids = tree.ids();
    tree.leaves()
        .map(|l| {
            let id = ids[l];
            map.get(&id.to_string()).copied().ok_or_else(|| bad(format!("payoff file has no value for leaf id {id}")))
        })
        .collect()
}
