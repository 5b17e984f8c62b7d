//! Terminal wealth of a trading strategy.
//!
//! Two routes are provided. [`terminal_cash_direct`] executes every trade at
//! the average of pre- and post-trade mid-price and half-spread. The
//! decomposition route writes the terminal cash of a liquidating strategy as
//! `v0 - Lambda` with
//!
//! ```text
//! v0     = xi0 + (iota x0^2 + delta0 zeta0^2) / 2
//! Lambda = sum P dX + 1/2 sum eta^2 dmu
//! eta    = rho * zeta = zeta0 + sum (rho / delta) (buys + sells)
//! ```
//!
//! where each interval mass of `mu` is paired with the value of `eta` at the
//! start of the interval and the atom with `eta(T)`. For trades at grid
//! points both routes agree exactly, up to rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::Market;
use crate::strategy::{StrategyError, TradeSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WealthError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("schedule starts at x0 = {schedule}, market has x0 = {market}")]
    InitialPosition { schedule: f64, market: f64 },
    #[error("position at leaf {leaf} is {position}, not zero")]
    TerminalNotZero { leaf: usize, position: f64 },
}

/// Spread state right after (and right before) the trade at each node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadState {
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub eta_pre: Vec<f64>,
    pub zeta_pre: Vec<f64>,
}

pub fn eta_path(market: &Market, s: &TradeSchedule) -> Result<SpreadState, WealthError> {
    let tree = market.tree();
    s.check_tree(tree)?;
    let liq = market.liquidity();
    let zeta0 = market.params().zeta0;
    let n = tree.len();
    let mut st = SpreadState { eta: vec![0.0; n], zeta: vec![0.0; n], eta_pre: vec![0.0; n], zeta_pre: vec![0.0; n] };
    for i in 0..n {
        let pre = tree.parent(i).map_or(zeta0, |p| st.eta[p]);
        st.eta_pre[i] = pre;
        st.eta[i] = pre + liq.eta_per_share(tree, i) * s.gross(i);
        st.zeta_pre[i] = pre / liq.rho[i];
        st.zeta[i] = st.eta[i] / liq.rho[i];
    }
    Ok(st)
}

fn check_x0(market: &Market, s: &TradeSchedule) -> Result<(), WealthError> {
    if s.x0 != market.params().x0 {
        return Err(WealthError::InitialPosition { schedule: s.x0, market: market.params().x0 });
    }
    Ok(())
}

/// Terminal cash per leaf from the midpoint execution rule, starting from
/// the market's initial cash.
pub fn terminal_cash_direct(market: &Market, s: &TradeSchedule) -> Result<Vec<f64>, WealthError> {
    terminal_cash_from(market, s, market.params().xi0)
}

/// As [`terminal_cash_direct`] with initial cash `xi0`.
pub fn terminal_cash_from(market: &Market, s: &TradeSchedule, xi0: f64) -> Result<Vec<f64>, WealthError> {
    check_x0(market, s)?;
    let tree = market.tree();
    let st = eta_path(market, s)?;
    let iota = market.params().iota;
    let pos = s.position_path(tree);
    let mut cash = vec![0.0; tree.len()];
    for i in 0..tree.len() {
        let (before_cash, before_pos) = tree.parent(i).map_or((xi0, s.x0), |p| (cash[p], pos[p]));
        let price = tree.node(i).price;
        let mid = price + 0.5 * iota * (before_pos + pos[i]);
        let half_spread = 0.5 * (st.zeta_pre[i] + st.zeta[i]);
        cash[i] = before_cash - mid * s.net(i) - half_spread * s.gross(i);
    }
    Ok(cash[tree.leaves()].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioWealth {
    /// Terminal cash from the midpoint rule.
    pub xi_t: f64,
    pub lambda_t: f64,
    /// `sum P dX` along the path.
    pub p_integral: f64,
    /// `1/2 sum eta^2 dmu` along the path.
    pub eta_penalty: f64,
    pub terminal_position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthBreakdown {
    pub v0: f64,
    /// One entry per leaf.
    pub scenarios: Vec<ScenarioWealth>,
}

impl WealthBreakdown {
    /// `v0 - Lambda` per leaf; equals the terminal cash for liquidating
    /// strategies.
    pub fn decomposed_cash(&self) -> Vec<f64> {
        self.scenarios.iter().map(|sc| self.v0 - sc.lambda_t).collect()
    }
}

pub fn v0(market: &Market) -> f64 {
    let p = market.params();
    p.xi0 + 0.5 * (p.iota * p.x0 * p.x0 + market.delta0() * p.zeta0 * p.zeta0)
}

/// Per-leaf `(sum P dX, 1/2 sum eta^2 dmu)`. Does not look at `x0`.
pub(crate) fn lambda_parts(market: &Market, s: &TradeSchedule) -> Result<Vec<(f64, f64)>, WealthError> {
    let tree = market.tree();
    let st = eta_path(market, s)?;
    let liq = market.liquidity();
    let n = tree.len();
    let mut pint = vec![0.0; n];
    let mut pen = vec![0.0; n];
    for i in 0..n {
        let (p0, q0) = match tree.parent(i) {
            Some(p) => (pint[p], pen[p] + 0.5 * st.eta[p] * st.eta[p] * liq.mu_in[i]),
            None => (0.0, 0.0),
        };
        pint[i] = p0 + tree.node(i).price * s.net(i);
        pen[i] = q0;
    }
    Ok(tree
        .leaves()
        .map(|l| (pint[l], pen[l] + 0.5 * st.eta[l] * st.eta[l] * liq.kappa[l]))
        .collect())
}

pub fn lambda_functional(market: &Market, s: &TradeSchedule) -> Result<WealthBreakdown, WealthError> {
    let tree = market.tree();
    let cash = terminal_cash_direct(market, s)?;
    let parts = lambda_parts(market, s)?;
    let pos = s.position_path(tree);
    let scenarios = tree
        .leaves()
        .zip(cash)
        .zip(parts)
        .map(|((l, xi_t), (p_integral, eta_penalty))| ScenarioWealth {
            xi_t,
            lambda_t: p_integral + eta_penalty,
            p_integral,
            eta_penalty,
            terminal_position: pos[l],
        })
        .collect();
    Ok(WealthBreakdown { v0: v0(market), scenarios })
}

/// Largest `|xi_direct - (v0 - Lambda)|` over leaves. Requires a flat
/// terminal position.
pub fn consistency_check(market: &Market, s: &TradeSchedule) -> Result<f64, WealthError> {
    let tree = market.tree();
    s.check_tree(tree)?;
    if let Some(k) = s.check_terminal_zero(tree).iter().position(|ok| !ok) {
        let leaf = tree.leaves().start + k;
        return Err(WealthError::TerminalNotZero { leaf, position: s.position_path(tree)[leaf] });
    }
    let b = lambda_functional(market, s)?;
    Ok(b.scenarios.iter().fold(0.0f64, |m, sc| m.max((sc.xi_t - (b.v0 - sc.lambda_t)).abs())))
}

/// A-priori bound on traded volume for strategies with `Lambda <= level^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvBound {
    /// `C` in `TV^2 <= C (sup|P| TV + level^2)`.
    pub c: f64,
    /// `max(C, sqrt C)`, so that `bound <= linear_constant * (level + sup|P|)`.
    pub linear_constant: f64,
    pub sup_price: f64,
    pub level: f64,
    /// Positive root of `x^2 = C (sup|P| x + level^2)`.
    pub bound: f64,
}

/// The atom alone gives `1/2 sum eta^2 dmu >= kappa_T (min rho/delta)^2 TV^2 / 2`,
/// so `C = 2 / (min kappa_T * (min rho/delta)^2)`.
pub fn tv_bound(market: &Market, level: f64) -> TvBound {
    let tree = market.tree();
    let liq = market.liquidity();
    let min_eta_per_share = (0..tree.len()).map(|i| liq.eta_per_share(tree, i)).fold(f64::INFINITY, f64::min);
    let min_kappa_t = tree.leaves().map(|l| liq.kappa[l]).fold(f64::INFINITY, f64::min);
    let c = 2.0 / (min_kappa_t * min_eta_per_share * min_eta_per_share);
    let p = tree.sup_abs_price();
    let bound = 0.5 * (c * p + (c * c * p * p + 4.0 * c * level * level).sqrt());
    TvBound { c, linear_constant: c.max(c.sqrt()), sup_price: p, level, bound }
}

/// `(Lambda(s0) + Lambda(s1)) / 2 - Lambda(mid)` per leaf, with `mid` the
/// gross midpoint of the two schedules.
pub fn convexity_gap(market: &Market, s0: &TradeSchedule, s1: &TradeSchedule) -> Result<Vec<f64>, WealthError> {
    let mid = TradeSchedule::convex_combine(s0, s1, 0.5)?;
    let l0 = lambda_parts(market, s0)?;
    let l1 = lambda_parts(market, s1)?;
    let lm = lambda_parts(market, &mid)?;
    Ok((0..l0.len())
        .map(|k| 0.5 * ((l0[k].0 + l0[k].1) + (l1[k].0 + l1[k].1)) - (lm[k].0 + lm[k].1))
        .collect())
}

/// `Lambda` of the scaled strategy `c X` is `constant + linear c + quadratic c^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub constant: f64,
    pub linear: f64,
    pub quadratic: f64,
}

impl ScalingCoefficients {
    pub fn eval(&self, c: f64) -> f64 {
        self.constant + c * (self.linear + c * self.quadratic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub scenarios: Vec<ScalingCoefficients>,
    /// Largest deviation of the polynomial from `Lambda` evaluated directly
    /// at `c = 0, 1, 2`.
    pub max_residual: f64,
}

pub fn quadratic_scaling(market: &Market, s: &TradeSchedule) -> Result<ScalingFit, WealthError> {
    let tree = market.tree();
    let st = eta_path(market, s)?;
    let liq = market.liquidity();
    let zeta0 = market.params().zeta0;
    let n = tree.len();
    // path sums of P dX, (eta - zeta0) dmu and (eta - zeta0)^2 dmu
    let mut acc = vec![[0.0f64; 3]; n];
    for i in 0..n {
        let mut a = match tree.parent(i) {
            Some(p) => {
                let e = st.eta[p] - zeta0;
                let w = liq.mu_in[i];
                [acc[p][0], acc[p][1] + e * w, acc[p][2] + e * e * w]
            }
            None => [0.0; 3],
        };
        a[0] += tree.node(i).price * s.net(i);
        acc[i] = a;
    }
    let mass = market.delta0();
    let scenarios: Vec<ScalingCoefficients> = tree
        .leaves()
        .map(|l| {
            let e = st.eta[l] - zeta0;
            let k = liq.kappa[l];
            ScalingCoefficients {
                constant: 0.5 * zeta0 * zeta0 * mass,
                linear: acc[l][0] + zeta0 * (acc[l][1] + e * k),
                quadratic: 0.5 * (acc[l][2] + e * e * k),
            }
        })
        .collect();
    let mut max_residual = 0.0f64;
    for c in [0.0, 1.0, 2.0] {
        let direct = lambda_parts(market, &s.scaled(c))?;
        for (coef, (pi, pen)) in scenarios.iter().zip(direct) {
            max_residual = max_residual.max((coef.eval(c) - (pi + pen)).abs());
        }
    }
    Ok(ScalingFit { scenarios, max_residual })
}
