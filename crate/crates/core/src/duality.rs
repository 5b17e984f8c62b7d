//! Dual certificates for super-replication.
//!
//! A certificate is a triple of a node measure `Q`, a `Q`-martingale `M` and
//! a process `alpha`. It is feasible when the unaffected price stays within
//! a band around `M`:
//!
//! ```text
//! |P_t - M_t| <= B_t = (rho_t / delta_t) E_Q[ int_[t,T] alpha dmu | F_t ]
//! ```
//!
//! On the tree `int_[t_i,T] alpha dmu` is `sum_{j >= i} alpha_j m_j`, where
//! `m_j` is the mass of the step leaving `t_j` (paired with the value at its
//! left end, as in the wealth module) and `m_N` the atom. Every feasible
//! certificate yields the lower bound
//!
//! ```text
//! E_Q[H] - 1/2 ||alpha - zeta0||^2_{L2(Q x mu)} - M_0 x0 - 1/2 iota x0^2
//! ```
//!
//! on the super-replication price; [`weak_duality_check`] verifies the
//! bound against a concrete hedge and splits the margin into its three
//! nonnegative parts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::Market;
use crate::strategy::TradeSchedule;
use crate::tree::{is_martingale, MartingaleCheck, NodeMeasure, TreeError};
use crate::wealth::{self, WealthError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("payoff must be finite and nonnegative, got {value} at leaf {leaf}")]
    NegativePayoff { leaf: usize, value: f64 },
    #[error("payoff has {got} values, tree has {expected} leaves")]
    PayoffLength { expected: usize, got: usize },
    #[error("hedge falls short of the payoff by {shortfall} at leaf {leaf}")]
    SuperReplicationViolated { leaf: usize, shortfall: f64 },
    #[error("certificate is infeasible: band violated by {violation} at node {node}")]
    InfeasibleCertificate { node: usize, violation: f64 },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Wealth(#[from] WealthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    #[serde(rename = "q_transitions")]
    pub measure: NodeMeasure,
    #[serde(rename = "M")]
    pub martingale: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl DualCertificate {
    pub fn validate(&self, market: &Market) -> Result<(), DualityError> {
        let tree = market.tree();
        self.measure.validate(tree)?;
        for (name, v) in [("M", &self.martingale), ("alpha", &self.alpha)] {
            if v.len() != tree.len() {
                return Err(DualityError::InvalidCertificate(format!(
                    "{name} has {} entries, tree has {} nodes",
                    v.len(),
                    tree.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DualityError::InvalidCertificate(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    /// `Q = P`, `M = P`, `alpha = zeta0`: feasible whenever `P` is a
    /// martingale under the reference measure.
    pub fn frictionless(market: &Market) -> Self {
        let tree = market.tree();
        Self {
            measure: tree.reference_measure(),
            martingale: tree.prices(),
            alpha: vec![market.params().zeta0; tree.len()],
        }
    }

    /// `M = 0` and `alpha = running max of |P rho|` under `measure`. Feasible
    /// for every price path because the band at `t` is at least
    /// `alpha_t / rho_t >= |P_t|`.
    pub fn running_max(market: &Market, measure: NodeMeasure) -> Self {
        let tree = market.tree();
        let rho = &market.liquidity().rho;
        let mut alpha = vec![0.0; tree.len()];
        for i in 0..tree.len() {
            let own = (tree.node(i).price * rho[i]).abs();
            alpha[i] = tree.parent(i).map_or(own, |p| alpha[p].max(own));
        }
        Self { measure, martingale: vec![0.0; tree.len()], alpha }
    }
}

/// The `mu`-mass paired with each node's value under `q`: the expected mass
/// of the next step at internal nodes, the atom `kappa_T` at leaves.
pub fn node_mu_mass(market: &Market, q: &NodeMeasure) -> Vec<f64> {
    let tree = market.tree();
    let liq = market.liquidity();
    (0..tree.len())
        .map(|i| {
            if tree.is_leaf(i) {
                liq.kappa[i]
            } else {
                tree.children(i).map(|c| q.transition(c) * liq.mu_in[c]).sum()
            }
        })
        .collect()
}

/// Band half-width `B` for a measure and an `alpha` process.
pub fn band_width(market: &Market, q: &NodeMeasure, alpha: &[f64]) -> Vec<f64> {
    let tree = market.tree();
    let liq = market.liquidity();
    let n = tree.len();
    // s[i] = E_Q[ sum_{j >= i} alpha_j m_j | node i ]
    let mut s = vec![0.0; n];
    for i in (0..n).rev() {
        s[i] = if tree.is_leaf(i) {
            alpha[i] * liq.kappa[i]
        } else {
            tree.children(i).map(|c| q.transition(c) * (alpha[i] * liq.mu_in[c] + s[c])).sum()
        };
    }
    (0..n).map(|i| liq.eta_per_share(tree, i) * s[i]).collect()
}

pub fn constraint_bound(market: &Market, cert: &DualCertificate) -> Result<Vec<f64>, DualityError> {
    cert.validate(market)?;
    Ok(band_width(market, &cert.measure, &cert.alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `max_t (|P_t - M_t| - B_t)`; nonpositive for feasible certificates.
    pub worst_violation: f64,
    pub worst_node: usize,
    pub tolerance: f64,
    pub martingale: MartingaleCheck,
    pub bound: Vec<f64>,
}

/// Absolute tolerance for band checks.
pub fn feasibility_tolerance(market: &Market) -> f64 {
    1e-10 * market.scale()
}

pub fn check_feasibility(market: &Market, cert: &DualCertificate) -> Result<FeasibilityReport, DualityError> {
    let bound = constraint_bound(market, cert)?;
    let tree = market.tree();
    let mut worst = (f64::NEG_INFINITY, 0);
    for i in 0..tree.len() {
        let v = (tree.node(i).price - cert.martingale[i]).abs() - bound[i];
        if v > worst.0 {
            worst = (v, i);
        }
    }
    let martingale = is_martingale(tree, &cert.measure, &cert.martingale);
    let tolerance = feasibility_tolerance(market);
    Ok(FeasibilityReport {
        feasible: worst.0 <= tolerance && martingale.is_martingale,
        worst_violation: worst.0,
        worst_node: worst.1,
        tolerance,
        martingale,
        bound,
    })
}

pub fn validate_payoff(market: &Market, payoff: &[f64]) -> Result<(), DualityError> {
    let expected = market.tree().n_leaves();
    if payoff.len() != expected {
        return Err(DualityError::PayoffLength { expected, got: payoff.len() });
    }
    if let Some((leaf, &value)) = payoff.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(DualityError::NegativePayoff { leaf, value });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    pub value: f64,
    pub expected_payoff: f64,
    /// `||alpha - zeta0||^2` in `L2(Q x mu)`.
    pub alpha_norm_sq: f64,
    pub m0: f64,
}

/// The dual objective without feasibility checks; use [`dual_objective`]
/// for validated input.
pub(crate) fn dual_value_unchecked(
    market: &Market,
    q: &NodeMeasure,
    alpha: &[f64],
    m0: f64,
    payoff: &[f64],
) -> DualValue {
    let tree = market.tree();
    let prob = q.node_probabilities(tree);
    let mass = node_mu_mass(market, q);
    let zeta0 = market.params().zeta0;
    let expected_payoff: f64 = tree.leaves().zip(payoff).map(|(l, h)| prob[l] * h).sum();
    let alpha_norm_sq: f64 = (0..tree.len())
        .map(|i| {
            let d = alpha[i] - zeta0;
            prob[i] * d * d * mass[i]
        })
        .sum();
    let p = market.params();
    let value = expected_payoff - 0.5 * alpha_norm_sq - m0 * p.x0 - 0.5 * p.iota * p.x0 * p.x0;
    DualValue { value, expected_payoff, alpha_norm_sq, m0 }
}

pub fn dual_objective(market: &Market, cert: &DualCertificate, payoff: &[f64]) -> Result<DualValue, DualityError> {
    cert.validate(market)?;
    validate_payoff(market, payoff)?;
    Ok(dual_value_unchecked(market, &cert.measure, &cert.alpha, cert.martingale[0], payoff))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakDualityReport {
    /// `xi0 - dual value`; nonnegative up to rounding.
    pub margin: f64,
    pub primal_cash: f64,
    pub dual: DualValue,
    /// `E_Q[xi_T - H]`.
    pub superreplication_slack: f64,
    /// `E_Q[ sum (P - M) dX + B (dX_up + dX_down) ]`.
    pub band_slack: f64,
    /// `1/2 E_Q[ sum (eta - alpha)^2 dmu ]`.
    pub eta_alpha_slack: f64,
    /// Per-node contributions to `eta_alpha_slack`.
    pub eta_alpha_slack_by_node: Vec<f64>,
    pub tolerance: f64,
}

impl WeakDualityReport {
    /// Difference between the margin and the sum of its three parts.
    pub fn decomposition_error(&self) -> f64 {
        (self.margin - (self.superreplication_slack + self.band_slack + self.eta_alpha_slack)).abs()
    }
}

/// Verifies `xi0 >= dual value` for a super-replicating, liquidating
/// schedule and a feasible certificate.
pub fn weak_duality_check(
    market: &Market,
    schedule: &TradeSchedule,
    xi0: f64,
    cert: &DualCertificate,
    payoff: &[f64],
) -> Result<WeakDualityReport, DualityError> {
    let tree = market.tree();
    validate_payoff(market, payoff)?;
    let feas = check_feasibility(market, cert)?;
    if !feas.feasible {
        return Err(DualityError::InfeasibleCertificate { node: feas.worst_node, violation: feas.worst_violation });
    }
    let tolerance = 1e-9 * (market.scale() + payoff.iter().fold(0.0f64, |m, h| m.max(*h)));
    schedule.check_tree(tree).map_err(WealthError::from)?;
    if let Some(k) = schedule.check_terminal_zero(tree).iter().position(|ok| !ok) {
        let leaf = tree.leaves().start + k;
        let position = schedule.position_path(tree)[leaf];
        return Err(WealthError::TerminalNotZero { leaf, position }.into());
    }
    let cash = wealth::terminal_cash_from(market, schedule, xi0)?;
    for (k, (&xi, &h)) in cash.iter().zip(payoff).enumerate() {
        if xi < h - tolerance {
            return Err(DualityError::SuperReplicationViolated { leaf: k, shortfall: h - xi });
        }
    }

    let q = &cert.measure;
    let prob = q.node_probabilities(tree);
    let mass = node_mu_mass(market, q);
    let st = wealth::eta_path(market, schedule)?;
    let dual = dual_value_unchecked(market, q, &cert.alpha, cert.martingale[0], payoff);
    let superreplication_slack: f64 =
        tree.leaves().zip(cash.iter().zip(payoff)).map(|(l, (xi, h))| prob[l] * (xi - h)).sum();
    let band_slack: f64 = (0..tree.len())
        .map(|i| {
            let gap = tree.node(i).price - cert.martingale[i];
            prob[i] * (gap * schedule.net(i) + feas.bound[i] * schedule.gross(i))
        })
        .sum();
    let eta_alpha_slack_by_node: Vec<f64> = (0..tree.len())
        .map(|i| {
            let d = st.eta[i] - cert.alpha[i];
            0.5 * prob[i] * d * d * mass[i]
        })
        .collect();
    Ok(WeakDualityReport {
        margin: xi0 - dual.value,
        primal_cash: xi0,
        dual,
        superreplication_slack,
        band_slack,
        eta_alpha_slack: eta_alpha_slack_by_node.iter().sum(),
        eta_alpha_slack_by_node,
        tolerance,
    })
}
