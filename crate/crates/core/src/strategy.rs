//! Bounded-variation trading strategies on a scenario tree.
//!
//! A strategy is a pair of nonnegative trade sizes per node: shares bought
//! and shares sold at that node's time. Since the trade is attached to the
//! node it is automatically adapted. Buys and sells at the same node may
//! both be positive (the gross form); [`TradeSchedule::normalize`] nets
//! them out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::ScenarioTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("schedule has {got} nodes, tree has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("node {node}: trade sizes must be finite and nonnegative (buy {buy}, sell {sell})")]
    InvalidTrade { node: usize, buy: f64, sell: f64 },
    #[error("schedules start from different positions ({0} vs {1})")]
    InitialPositionMismatch(f64, f64),
    #[error("combination weight {0} is outside [0, 1]")]
    BadWeight(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeSchedule {
    pub buys: Vec<f64>,
    pub sells: Vec<f64>,
    pub x0: f64,
}

impl TradeSchedule {
    pub fn new(buys: Vec<f64>, sells: Vec<f64>, x0: f64) -> Result<Self, StrategyError> {
        if buys.len() != sells.len() {
            return Err(StrategyError::LengthMismatch { expected: buys.len(), got: sells.len() });
        }
        for (node, (&buy, &sell)) in buys.iter().zip(&sells).enumerate() {
            if !(buy >= 0.0 && sell >= 0.0 && buy.is_finite() && sell.is_finite()) {
                return Err(StrategyError::InvalidTrade { node, buy, sell });
            }
        }
        Ok(Self { buys, sells, x0 })
    }

    /// No trading at all.
    pub fn idle(n: usize, x0: f64) -> Self {
        Self { buys: vec![0.0; n], sells: vec![0.0; n], x0 }
    }

    /// Splits signed net trades into buys and sells.
    pub fn from_net(net: &[f64], x0: f64) -> Self {
        Self {
            buys: net.iter().map(|d| d.max(0.0)).collect(),
            sells: net.iter().map(|d| (-d).max(0.0)).collect(),
            x0,
        }
    }

    /// Net trades on internal nodes plus a forced liquidation at every
    /// leaf, so the terminal position is zero by construction.
    pub fn liquidating(tree: &ScenarioTree, net_internal: &[f64], x0: f64) -> Self {
        let mut net = vec![0.0; tree.len()];
        net[..net_internal.len()].copy_from_slice(net_internal);
        let mut pos = vec![0.0; tree.len()];
        for i in 0..tree.len() {
            let before = tree.parent(i).map_or(x0, |p| pos[p]);
            if tree.is_leaf(i) {
                net[i] = -before;
            }
            pos[i] = before + net[i];
        }
        Self::from_net(&net, x0)
    }

    pub fn len(&self) -> usize {
        self.buys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buys.is_empty()
    }

    pub fn check_tree(&self, tree: &ScenarioTree) -> Result<(), StrategyError> {
        if self.len() != tree.len() {
            return Err(StrategyError::LengthMismatch { expected: tree.len(), got: self.len() });
        }
        Self::new(self.buys.clone(), self.sells.clone(), self.x0).map(|_| ())
    }

    pub fn net(&self, i: usize) -> f64 {
        self.buys[i] - self.sells[i]
    }

    pub fn gross(&self, i: usize) -> f64 {
        self.buys[i] + self.sells[i]
    }

    pub fn has_trades(&self) -> bool {
        self.buys.iter().chain(&self.sells).any(|&v| v > 0.0)
    }

    /// Position right after the trade at each node.
    pub fn position_path(&self, tree: &ScenarioTree) -> Vec<f64> {
        let mut pos = vec![0.0; tree.len()];
        for i in 0..tree.len() {
            let before = tree.parent(i).map_or(self.x0, |p| pos[p]);
            pos[i] = before + self.net(i);
        }
        pos
    }

    /// Nets simultaneous buys and sells at each node.
    pub fn normalize(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            let m = self.buys[i].min(self.sells[i]);
            out.buys[i] -= m;
            out.sells[i] -= m;
        }
        out
    }

    /// Total traded volume along every root-to-leaf path, one entry per leaf.
    pub fn total_variation(&self, tree: &ScenarioTree) -> Vec<f64> {
        let mut tv = vec![0.0; tree.len()];
        for i in 0..tree.len() {
            tv[i] = tree.parent(i).map_or(0.0, |p| tv[p]) + self.gross(i);
        }
        tv[tree.leaves()].to_vec()
    }

    /// Component-wise `w * s0 + (1 - w) * s1` of the gross decompositions.
    pub fn convex_combine(s0: &Self, s1: &Self, w: f64) -> Result<Self, StrategyError> {
        if !(0.0..=1.0).contains(&w) {
            return Err(StrategyError::BadWeight(w));
        }
        if s0.len() != s1.len() {
            return Err(StrategyError::LengthMismatch { expected: s0.len(), got: s1.len() });
        }
        if s0.x0 != s1.x0 {
            return Err(StrategyError::InitialPositionMismatch(s0.x0, s1.x0));
        }
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        Ok(Self { buys: mix(&s0.buys, &s1.buys), sells: mix(&s0.sells, &s1.sells), x0: s0.x0 })
    }

    /// Every trade (and the initial position) multiplied by `c >= 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            buys: self.buys.iter().map(|v| c * v).collect(),
            sells: self.sells.iter().map(|v| c * v).collect(),
            x0: c * self.x0,
        }
    }

    /// Whether the position is flat at each leaf, up to
    /// `1e-12 * (1 + |x0| + TV)`.
    pub fn check_terminal_zero(&self, tree: &ScenarioTree) -> Vec<bool> {
        let pos = self.position_path(tree);
        let tv = self.total_variation(tree);
        tree.leaves()
            .zip(tv)
            .map(|(l, v)| pos[l].abs() <= 1e-12 * (1.0 + self.x0.abs() + v))
            .collect()
    }

    pub fn liquidates(&self, tree: &ScenarioTree) -> bool {
        self.check_terminal_zero(tree).into_iter().all(|b| b)
    }
}
