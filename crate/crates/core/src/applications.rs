//! Call super-replication and shadow-price verification.
//!
//! With deterministic liquidity the cheapest way to super-replicate a
//! cash-settled call is to buy the missing share at once and hold it until
//! maturity. Funding that schedule with [`call_price_formula`] leaves
//! exactly `P_T` in cash on every path.
//!
//! [`shadow_price_check`] tests a sufficient condition for a liquidating
//! schedule to maximize expected utility: a martingale under the measure
//! with density proportional to marginal utility of terminal cash that
//! stays inside the spread band generated by the schedule's own spread
//! path and touches its lower edge where the schedule sells and its upper
//! edge where it buys.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duality::band_width;
use crate::market::Market;
use crate::strategy::TradeSchedule;
use crate::tree::{conditional_expectation, martingale_in_band, BandSelection, NodeMeasure, RootChoice, ScenarioTree, TreeError};
use crate::wealth::{self, WealthError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("strike must be finite and nonnegative, got {0}")]
    InvalidStrike(f64),
    #[error("invalid utility: {0}")]
    InvalidUtility(String),
    #[error("terminal cash {cash} at leaf {leaf} is outside the utility's domain")]
    UtilityDomain { leaf: usize, cash: f64 },
    #[error("band has {got} entries, tree has {expected} nodes")]
    BandLength { expected: usize, got: usize },
    #[error(transparent)]
    Wealth(#[from] WealthError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallSpec {
    pub strike: f64,
}

impl CallSpec {
    pub fn new(strike: f64) -> Result<Self, AppError> {
        if !(strike >= 0.0) || !strike.is_finite() {
            return Err(AppError::InvalidStrike(strike));
        }
        Ok(Self { strike })
    }

    /// `(P_T - k)^+` per leaf.
    pub fn payoff(&self, tree: &ScenarioTree) -> Vec<f64> {
        tree.leaf_prices().iter().map(|p| (p - self.strike).max(0.0)).collect()
    }
}

fn check_call_preconditions(market: &Market) -> Result<(), AppError> {
    if !market.tree().has_deterministic_liquidity() {
        return Err(AppError::NotApplicable("depth or resilience varies across scenarios".into()));
    }
    let x0 = market.params().x0;
    if x0 > 1.0 {
        return Err(AppError::NotApplicable(format!("initial position {x0} exceeds one share")));
    }
    Ok(())
}

/// Closed-form super-replication price of a call. It does not depend on
/// the strike.
pub fn call_price_formula(market: &Market) -> Result<f64, AppError> {
    check_call_preconditions(market)?;
    let tree = market.tree();
    let p = market.params();
    let leaf = tree.leaves().start;
    let rho_t = market.liquidity().rho[leaf];
    let delta_t = tree.node(leaf).delta;
    let delta0 = market.delta0();
    let open = 1.0 - p.x0;
    Ok(tree.node(0).price * open - 0.5 * p.iota * p.x0 * p.x0
        + p.zeta0 * open
        + open * open / (2.0 * delta0)
        + (p.zeta0 + open / delta0) / rho_t
        + 1.0 / (2.0 * delta_t))
}

/// Buy the missing `1 - x0` shares at the root and sell the single share
/// at every leaf.
pub fn buy_and_hold(market: &Market) -> Result<TradeSchedule, AppError> {
    let x0 = market.params().x0;
    if x0 > 1.0 {
        return Err(AppError::NotApplicable(format!("initial position {x0} exceeds one share")));
    }
    let tree = market.tree();
    let mut s = TradeSchedule::idle(tree.len(), x0);
    s.buys[0] = 1.0 - x0;
    for l in tree.leaves() {
        s.sells[l] = 1.0;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCheck {
    pub closed_form: f64,
    pub strike: f64,
    /// Terminal cash per leaf of buy-and-hold funded at `closed_form`.
    pub terminal_cash: Vec<f64>,
    pub terminal_price: Vec<f64>,
    /// `max |xi_T - P_T|` over leaves.
    pub max_abs_error: f64,
    /// Whether `xi_T >= (P_T - k)^+` on every leaf.
    pub dominates_payoff: bool,
}

pub fn verify_call_superreplication(market: &Market, call: CallSpec) -> Result<CallCheck, AppError> {
    let closed_form = call_price_formula(market)?;
    let s = buy_and_hold(market)?;
    let tree = market.tree();
    let terminal_cash = wealth::terminal_cash_from(market, &s, closed_form)?;
    let terminal_price = tree.leaf_prices();
    let payoff = call.payoff(tree);
    let max_abs_error = terminal_cash.iter().zip(&terminal_price).fold(0.0f64, |m, (c, p)| m.max((c - p).abs()));
    let dominates_payoff = terminal_cash.iter().zip(&payoff).all(|(c, h)| *c >= h - 1e-10 * (1.0 + h));
    Ok(CallCheck { closed_form, strike: call.strike, terminal_cash, terminal_price, max_abs_error, dominates_payoff })
}

/// Supported utility families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Utility {
    /// `-exp(-a x) / a`.
    Exponential { a: f64 },
    /// `x^p / p` on `x > 0`, with `p < 1`, `p != 0`.
    Power { p: f64 },
    /// `ln x` on `x > 0`.
    Log,
}

impl Utility {
    pub fn validate(&self) -> Result<(), AppError> {
        match *self {
            Utility::Exponential { a } if !(a > 0.0) || !a.is_finite() => {
                Err(AppError::InvalidUtility(format!("risk aversion {a} must be positive")))
            }
            Utility::Power { p } if !(p < 1.0) || p == 0.0 || !p.is_finite() => {
                Err(AppError::InvalidUtility(format!("exponent {p} must be below 1 and nonzero")))
            }
            _ => Ok(()),
        }
    }

    fn in_domain(&self, x: f64) -> bool {
        match self {
            Utility::Exponential { .. } => x.is_finite(),
            _ => x > 0.0 && x.is_finite(),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Utility::Exponential { a } => -(-a * x).exp() / a,
            Utility::Power { p } => x.powf(p) / p,
            Utility::Log => x.ln(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.log_derivative(x).exp()
    }

    /// `ln u'(x)`, used to normalize marginal utilities without underflow.
    pub fn log_derivative(&self, x: f64) -> f64 {
        match *self {
            Utility::Exponential { a } => -a * x,
            Utility::Power { p } => (p - 1.0) * x.ln(),
            Utility::Log => -x.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowCheckInput {
    pub schedule: TradeSchedule,
    pub utility: Utility,
    /// Candidate shadow martingale; searched for when absent.
    #[serde(default)]
    pub martingale: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowVerdict {
    Optimal,
    /// The sufficient condition could not be confirmed. This does not
    /// mean the schedule is suboptimal.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    pub verdict: ShadowVerdict,
    pub terminal_cash: Vec<f64>,
    pub measure: NodeMeasure,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub martingale: Option<Vec<f64>>,
    /// Whether `martingale` was supplied or found by the band search.
    pub searched: bool,
    /// Per-node `|M - E_Q[M_child]|` (zero at leaves).
    pub martingale_defect: Vec<f64>,
    /// Per-node `lambda - |P - M|`; negative where the band is violated.
    pub band_slack: Vec<f64>,
    /// Per-node distance of `M` from the band edge the trade direction
    /// requires; zero where the node does not trade.
    pub flat_off_residual: Vec<f64>,
    pub tolerance: f64,
    pub reasons: Vec<String>,
}

/// Measure with leaf weights proportional to reference probability times
/// marginal utility of the schedule's terminal cash.
pub fn marginal_utility_measure(
    market: &Market,
    terminal_cash: &[f64],
    utility: Utility,
) -> Result<NodeMeasure, AppError> {
    let tree = market.tree();
    let prob = tree.reference_measure().leaf_probabilities(tree);
    let logs: Vec<f64> = terminal_cash
        .iter()
        .zip(&prob)
        .map(|(&x, &p)| if p > 0.0 { p.ln() + utility.log_derivative(x) } else { f64::NEG_INFINITY })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
    Ok(NodeMeasure::from_leaf_weights(tree, &weights)?)
}

pub fn shadow_price_check(market: &Market, input: &ShadowCheckInput) -> Result<ShadowReport, AppError> {
    input.utility.validate()?;
    let tree = market.tree();
    let s = input.schedule.normalize();
    s.check_tree(tree).map_err(WealthError::from)?;
    if let Some(k) = s.check_terminal_zero(tree).iter().position(|ok| !ok) {
        let leaf = tree.leaves().start + k;
        return Err(WealthError::TerminalNotZero { leaf, position: s.position_path(tree)[leaf] }.into());
    }
    let terminal_cash = wealth::terminal_cash_direct(market, &s)?;
    if let Some((k, &cash)) = terminal_cash.iter().enumerate().find(|(_, x)| !input.utility.in_domain(**x)) {
        return Err(AppError::UtilityDomain { leaf: tree.leaves().start + k, cash });
    }
    let measure = marginal_utility_measure(market, &terminal_cash, input.utility)?;
    let alpha = wealth::eta_path(market, &s)?.eta;
    let lambda = band_width(market, &measure, &alpha);
    let tolerance = 1e-8 * market.scale();
    let prices = tree.prices();

    let (martingale, searched) = match &input.martingale {
        Some(m) => {
            tree.check_len(m.len())?;
            (Some(m.clone()), false)
        }
        None => {
            // pin M near the required band edge where the schedule trades,
            // leaving half the tolerance for rounding in the checks below
            let pin = 0.5 * tolerance;
            let mut lo = vec![0.0; tree.len()];
            let mut hi = vec![0.0; tree.len()];
            let mut target = vec![0.0; tree.len()];
            for i in 0..tree.len() {
                let (p, l) = (prices[i], lambda[i]);
                (lo[i], hi[i], target[i]) = if s.sells[i] > 0.0 {
                    (p - l - pin, p - l + pin, p - l)
                } else if s.buys[i] > 0.0 {
                    (p + l - pin, p + l + pin, p + l)
                } else {
                    (p - l, p + l, p)
                };
            }
            match martingale_in_band(tree, &measure, &lo, &hi, RootChoice::Closest(target[0]))? {
                BandSelection::Feasible { martingale } => (Some(martingale), true),
                BandSelection::Infeasible { .. } => (None, true),
            }
        }
    };

    let mut reasons = Vec::new();
    let n = tree.len();
    let (mut martingale_defect, mut band_slack, mut flat_off_residual) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    match &martingale {
        None => reasons.push("no martingale found inside the band with the required contact points".to_string()),
        Some(m) => {
            let q = measure.transitions();
            for i in 0..n {
                if !tree.is_leaf(i) {
                    let e: f64 = tree.children(i).map(|c| q[c] * m[c]).sum();
                    martingale_defect[i] = (m[i] - e).abs();
                }
                band_slack[i] = lambda[i] - (prices[i] - m[i]).abs();
                flat_off_residual[i] = if s.sells[i] > 0.0 {
                    (m[i] - (prices[i] - lambda[i])).abs()
                } else if s.buys[i] > 0.0 {
                    (m[i] - (prices[i] + lambda[i])).abs()
                } else {
                    0.0
                };
            }
            let worst = |v: &[f64]| v.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &x)| if x > a.1 { (i, x) } else { a });
            let (i, d) = worst(&martingale_defect);
            if d > tolerance {
                reasons.push(format!("martingale defect {d:e} at node {i}"));
            }
            let neg: Vec<f64> = band_slack.iter().map(|x| -x).collect();
            let (i, v) = worst(&neg);
            if v > tolerance {
                reasons.push(format!("band violated by {v:e} at node {i}"));
            }
            let (i, r) = worst(&flat_off_residual);
            if r > tolerance {
                reasons.push(format!("band edge missed by {r:e} at trading node {i}"));
            }
        }
    }
    let verdict = if reasons.is_empty() { ShadowVerdict::Optimal } else { ShadowVerdict::Inconclusive };
    Ok(ShadowReport {
        verdict,
        terminal_cash,
        measure,
        alpha,
        lambda,
        martingale,
        searched,
        martingale_defect,
        band_slack,
        flat_off_residual,
        tolerance,
        reasons,
    })
}

/// A `q`-martingale within `[P - lambda, P + lambda]`, or the first node
/// where none exists. The conditional expectation of `P_T` is returned
/// when it already fits.
pub fn shadow_band_feasibility(tree: &ScenarioTree, q: &NodeMeasure, lambda: &[f64]) -> Result<BandSelection, AppError> {
    if lambda.len() != tree.len() {
        return Err(AppError::BandLength { expected: tree.len(), got: lambda.len() });
    }
    let prices = tree.prices();
    let ce = conditional_expectation(tree, q, &tree.leaf_prices())?;
    if ce.iter().zip(&prices).zip(lambda).all(|((m, p), l)| (m - p).abs() <= *l) {
        return Ok(BandSelection::Feasible { martingale: ce });
    }
    let lo: Vec<f64> = prices.iter().zip(lambda).map(|(p, l)| p - l).collect();
    let hi: Vec<f64> = prices.iter().zip(lambda).map(|(p, l)| p + l).collect();
    Ok(martingale_in_band(tree, q, &lo, &hi, RootChoice::Closest(ce[0]))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ImpactParams, TimeGrid};
    use crate::tree::TreeBuilder;

    fn chain(prices: &[f64], delta: f64, r: f64, params: ImpactParams) -> Market {
        let n = prices.len();
        let g = TimeGrid::uniform(1.0, n - 1).unwrap();
        let t = ScenarioTree::path(g, prices, &vec![delta; n], &vec![r; n]).unwrap();
        Market::new_unchecked(t, params).unwrap()
    }

    #[test]
    fn closed_form_substitutions() {
        let m = chain(&[100.0, 97.3], 10.0, 0.0, ImpactParams::default());
        assert!((call_price_formula(&m).unwrap() - 100.2).abs() < 1e-12);
        let m = chain(&[100.0, 97.3], 10.0, 0.0, ImpactParams { x0: 1.0, ..Default::default() });
        assert!((call_price_formula(&m).unwrap() - 0.05).abs() < 1e-12);
        let ln2 = std::f64::consts::LN_2;
        let m = chain(&[100.0, 97.3], 10.0, ln2, ImpactParams { zeta0: 0.1, ..Default::default() });
        assert!((call_price_formula(&m).unwrap() - 100.3).abs() < 1e-12);
    }

    #[test]
    fn funded_buy_and_hold_ends_with_the_price() {
        let m = chain(&[100.0, 104.0, 97.3], 10.0, 0.0, ImpactParams::default());
        let c = verify_call_superreplication(&m, CallSpec::new(95.0).unwrap()).unwrap();
        assert!((c.terminal_cash[0] - 97.3).abs() < 1e-10);
        assert!(c.dominates_payoff);
        let m = chain(&[100.0, 104.0, 97.3], 8.0, 0.5, ImpactParams { x0: 1.0, zeta0: 0.2, iota: 0.3, xi0: 0.0 });
        assert!(verify_call_superreplication(&m, CallSpec::new(0.0).unwrap()).unwrap().max_abs_error < 1e-10);
    }

    #[test]
    fn buy_and_hold_shapes() {
        for (x0, buy) in [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)] {
            let m = chain(&[100.0, 100.0], 10.0, 1.0, ImpactParams { x0, ..Default::default() });
            let s = buy_and_hold(&m).unwrap();
            assert_eq!((s.buys[0], s.sells[1]), (buy, 1.0));
        }
        let m = chain(&[100.0, 100.0], 10.0, 1.0, ImpactParams { x0: 1.5, ..Default::default() });
        assert!(matches!(buy_and_hold(&m), Err(AppError::NotApplicable(_))));
    }

    #[test]
    fn stochastic_liquidity_not_applicable() {
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let mut b = TreeBuilder::new(grid);
        let root = b.root(100.0, 10.0, 1.0);
        b.child(root, 0.5, 110.0, 10.0, 1.0);
        b.child(root, 0.5, 90.0, 5.0, 1.0);
        let m = Market::new_unchecked(b.build().unwrap(), ImpactParams::default()).unwrap();
        assert!(matches!(call_price_formula(&m), Err(AppError::NotApplicable(_))));
    }

    fn one_step(p0: f64, kids: &[f64], r: f64, params: ImpactParams) -> Market {
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let mut b = TreeBuilder::new(grid);
        let root = b.root(p0, 10.0, r);
        for &k in kids {
            b.child(root, 1.0 / kids.len() as f64, k, 10.0, r);
        }
        Market::new_unchecked(b.build().unwrap(), params).unwrap()
    }

    #[test]
    fn band_feasibility_examples() {
        let m = one_step(100.0, &[104.0, 105.0], 0.0, ImpactParams::default());
        let t = m.tree();
        let q = t.reference_measure();
        match shadow_band_feasibility(t, &q, &[1.0; 3]).unwrap() {
            BandSelection::Infeasible { node, lower, upper } => {
                assert_eq!(node, 0);
                assert!((lower - 103.5).abs() < 1e-12 && (upper - 101.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        match shadow_band_feasibility(t, &q, &[1e6; 3]).unwrap() {
            BandSelection::Feasible { martingale } => assert_eq!(martingale, vec![104.5, 104.0, 105.0]),
            other => panic!("{other:?}"),
        }
        let mart = one_step(100.0, &[90.0, 110.0], 0.0, ImpactParams::default());
        let q = mart.tree().reference_measure();
        assert!(matches!(shadow_band_feasibility(mart.tree(), &q, &[0.0; 3]).unwrap(), BandSelection::Feasible { .. }));
        assert!(matches!(shadow_band_feasibility(t, &t.reference_measure(), &[0.0; 3]).unwrap(), BandSelection::Infeasible { .. }));
    }

    #[test]
    fn idle_on_martingale_is_optimal() {
        let p = ImpactParams { zeta0: 0.5, xi0: 1.0, ..Default::default() };
        let m = one_step(100.0, &[90.0, 110.0], 0.0, p);
        let input = ShadowCheckInput {
            schedule: TradeSchedule::idle(3, 0.0),
            utility: Utility::Log,
            martingale: Some(m.tree().prices()),
        };
        let rep = shadow_price_check(&m, &input).unwrap();
        assert_eq!(rep.verdict, ShadowVerdict::Optimal);
        assert!(rep.lambda.iter().all(|l| (l - 0.5).abs() < 1e-12));
    }

    #[test]
    fn strong_drift_is_inconclusive() {
        let p = ImpactParams { zeta0: 0.5, xi0: 1.0, ..Default::default() };
        let m = one_step(100.0, &[104.0, 105.0], 0.0, p);
        let input = ShadowCheckInput { schedule: TradeSchedule::idle(3, 0.0), utility: Utility::Exponential { a: 1.0 }, martingale: None };
        let rep = shadow_price_check(&m, &input).unwrap();
        assert_eq!(rep.verdict, ShadowVerdict::Inconclusive);
        assert!(rep.martingale.is_none());
    }

    #[test]
    fn utility_derivatives() {
        for u in [Utility::Exponential { a: 0.7 }, Utility::Power { p: 0.3 }, Utility::Power { p: -2.0 }, Utility::Log] {
            let x = 1.7;
            let h = 1e-6;
            let fd = (u.value(x + h) - u.value(x - h)) / (2.0 * h);
            assert!((fd - u.derivative(x)).abs() < 1e-7);
        }
        assert!(Utility::Power { p: 1.0 }.validate().is_err());
        assert!(Utility::Exponential { a: 0.0 }.validate().is_err());
    }
}
