//! Primal and dual solvers for the super-replication price on a tree.
//!
//! The primal price of a payoff `H` is
//!
//! ```text
//! min over schedules of  max_leaf (H + Lambda) - 1/2 (iota x0^2 + delta0 zeta0^2)
//! ```
//!
//! where the trade at every leaf is the forced liquidation of the running
//! position, so the terminal constraint holds by construction and the
//! feasible set is the nonnegative orthant of (buys, sells) at internal
//! nodes. [`primal_solve`] replaces the maximum by a log-sum-exp with a
//! decreasing temperature and runs accelerated projected gradient on each
//! stage. The reported value is always the exact cost of the returned
//! schedule, so it is a valid upper bound whatever the convergence status.
//!
//! [`dual_ascent`] searches certificates `(Q, M, alpha)` through a
//! penalized surrogate and repairs every iterate to exact feasibility, so
//! each certificate it reports is a valid lower bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duality::{
    self, band_width, check_feasibility, dual_value_unchecked, DualCertificate, DualityError,
};
use crate::market::Market;
use crate::strategy::TradeSchedule;
use crate::tree::{conditional_expectation, martingale_in_band, BandSelection, NodeMeasure, RootChoice, TreeError};
use crate::wealth::{self, WealthError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no convergence within the iteration budget")]
    NonConvergence { report: Box<PriceReport> },
    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),
    #[error("initial certificate is infeasible: band violated by {violation} at node {node}")]
    InfeasibleInit { node: usize, violation: f64 },
    #[error("weak duality violated: primal {primal} < dual {dual}")]
    NegativeGap { primal: f64, dual: f64 },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Duality(#[from] DualityError),
    #[error(transparent)]
    Wealth(#[from] WealthError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Absolute tolerance on the primal value; `None` means `1e-6 * scale`.
    pub tol: Option<f64>,
    /// Iteration budget of the primal solver, summed over stages.
    pub max_iter: usize,
    /// First smoothing temperature, relative to the problem scale.
    pub smoothing_start: f64,
    /// Factor applied to the temperature between stages.
    pub smoothing_decay: f64,
    /// Iteration budget of the dual search.
    pub dual_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: None, max_iter: 400_000, smoothing_start: 1e-2, smoothing_decay: 0.1, dual_max_iter: 4000 }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidOptions(m.to_string()));
        if let Some(t) = self.tol {
            if !(t > 0.0) || !t.is_finite() {
                return bad("tol must be positive");
            }
        }
        if !(self.smoothing_start > 0.0) {
            return bad("smoothing_start must be positive");
        }
        if !(self.smoothing_decay > 0.0 && self.smoothing_decay < 1.0) {
            return bad("smoothing_decay must lie in (0, 1)");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        Ok(())
    }
}

/// Outcome of a solver run. Fields of the side that was not run are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    /// Initial cash that lets `strategy` super-replicate (currency).
    pub primal_value: Option<f64>,
    pub strategy: Option<TradeSchedule>,
    /// Objective of `certificate` (currency).
    pub dual_value: Option<f64>,
    pub certificate: Option<DualCertificate>,
    /// `primal_value - dual_value`.
    pub gap: Option<f64>,
    pub primal_iterations: usize,
    pub dual_iterations: usize,
    pub primal_converged: bool,
    /// Whether the dual search ended on a stall rather than the budget.
    pub dual_converged: bool,
    /// `1 + sup|P| + max H`, the magnitude used for tolerances.
    pub scale: f64,
}

impl PriceReport {
    fn empty(scale: f64) -> Self {
        Self {
            primal_value: None,
            strategy: None,
            dual_value: None,
            certificate: None,
            gap: None,
            primal_iterations: 0,
            dual_iterations: 0,
            primal_converged: false,
            dual_converged: false,
            scale,
        }
    }
}

fn problem_scale(market: &Market, payoff: &[f64]) -> f64 {
    market.scale() + payoff.iter().fold(0.0f64, |m, h| m.max(*h))
}

/// Initial cash needed for `s` to dominate `payoff` at every leaf, by the
/// direct execution rule.
pub fn required_cash(market: &Market, s: &TradeSchedule, payoff: &[f64]) -> Result<f64, SolverError> {
    let cash = wealth::terminal_cash_from(market, s, 0.0)?;
    Ok(payoff.iter().zip(&cash).map(|(h, c)| h - c).fold(f64::NEG_INFINITY, f64::max))
}

/// Smoothed objective on the orthant of internal (buy, sell) pairs.
struct Smoothed<'a> {
    market: &'a Market,
    payoff: &'a [f64],
    internal: usize,
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
    weights: Vec<f64>,
}

impl Smoothed<'_> {
    fn dim(&self) -> usize {
        2 * self.internal
    }

    /// Soft-max over leaves of `H + Lambda` at temperature `tau`, with the
    /// leaf liquidation volume `|X|` smoothed to `sqrt(X^2 + tau^2)`.
    /// `tau = 0` gives the exact maximum.
    fn eval(&self, x: &[f64], tau: f64, want_grad: bool) -> Eval {
        let tree = self.market.tree();
        let liq = self.market.liquidity();
        let n = tree.len();
        let k = self.internal;
        let x0 = self.market.params().x0;
        let c: Vec<f64> = (0..n).map(|i| liq.eta_per_share(tree, i)).collect();
        let mut pos = vec![0.0; n];
        let mut eta = vec![0.0; n];
        let mut acc = vec![0.0; n];
        let mut slope = vec![0.0; n];
        let zeta0 = self.market.params().zeta0;
        for i in 0..n {
            let (before, eta_before, acc_before) = match tree.parent(i) {
                Some(p) => (pos[p], eta[p], acc[p] + 0.5 * eta[p] * eta[p] * liq.mu_in[i]),
                None => (x0, zeta0, 0.0),
            };
            let price = tree.node(i).price;
            if i < k {
                let (b, s) = (x[i], x[k + i]);
                pos[i] = before + b - s;
                eta[i] = eta_before + c[i] * (b + s);
                acc[i] = acc_before + price * (b - s);
            } else {
                let g = if tau > 0.0 { (before * before + tau * tau).sqrt() } else { before.abs() };
                slope[i] = if g > 0.0 { before / g } else { 0.0 };
                pos[i] = 0.0;
                eta[i] = eta_before + c[i] * g;
                acc[i] = acc_before - price * before + 0.5 * eta[i] * eta[i] * liq.kappa[i];
            }
        }
        let leaves = tree.leaves();
        let f: Vec<f64> = leaves.clone().zip(self.payoff).map(|(l, h)| h + acc[l]).collect();
        let fmax = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (value, weights) = if tau > 0.0 {
            let e: Vec<f64> = f.iter().map(|v| ((v - fmax) / tau).exp()).collect();
            let sum: f64 = e.iter().sum();
            (fmax + tau * sum.ln(), e.iter().map(|v| v / sum).collect())
        } else {
            let top = f.iter().position(|&v| v == fmax).unwrap_or(0);
            let mut w = vec![0.0; f.len()];
            w[top] = 1.0;
            (fmax, w)
        };
        if !want_grad {
            return Eval { value, grad: Vec::new(), weights };
        }
        // Reverse pass: leaf weight below each node, weighted sums of the
        // spread tail and of the leaf terms.
        let mut w = vec![0.0; n];
        let mut a = vec![0.0; n];
        let mut d = vec![0.0; n];
        for (j, l) in leaves.enumerate() {
            let pi = weights[j];
            w[l] = pi;
            a[l] = pi * eta[l] * liq.kappa[l];
            d[l] = pi * (-tree.node(l).price + c[l] * eta[l] * liq.kappa[l] * slope[l]);
        }
        let mut grad = vec![0.0; 2 * k];
        for i in (0..k).rev() {
            let (mut wi, mut ai, mut di) = (0.0, 0.0, 0.0);
            for ch in tree.children(i) {
                wi += w[ch];
                ai += w[ch] * eta[i] * liq.mu_in[ch] + a[ch];
                di += d[ch];
            }
            w[i] = wi;
            a[i] = ai;
            d[i] = di;
            let price = tree.node(i).price;
            grad[i] = wi * price + c[i] * ai + di;
            grad[k + i] = -wi * price + c[i] * ai - di;
        }
        Eval { value, grad, weights }
    }
}

struct PrimalSolution {
    schedule: TradeSchedule,
    value: f64,
    iterations: usize,
    converged: bool,
    leaf_weights: Vec<f64>,
}

fn project(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

fn schedule_from(market: &Market, x: &[f64], internal: usize) -> TradeSchedule {
    let tree = market.tree();
    let net: Vec<f64> = (0..internal).map(|i| x[i] - x[internal + i]).collect();
    let mut s = TradeSchedule::liquidating(tree, &net, market.params().x0);
    // keep any simultaneous buy and sell that the iterate carries
    s.buys[..internal].copy_from_slice(&x[..internal]);
    s.sells[..internal].copy_from_slice(&x[internal..]);
    s.normalize()
}

fn primal_core(market: &Market, payoff: &[f64], opts: &SolverOptions) -> Result<PrimalSolution, SolverError> {
    opts.validate()?;
    duality::validate_payoff(market, payoff)?;
    let tree = market.tree();
    let scale = problem_scale(market, payoff);
    let tol = opts.tol.unwrap_or(1e-6 * scale);
    let internal = tree.internal().len();
    let obj = Smoothed { market, payoff, internal };

    let n_leaves = tree.n_leaves() as f64;
    // log-sum-exp overshoots the maximum by at most tau ln(#leaves), the
    // smoothed liquidation by a comparable amount
    let tau_final = tol / (4.0 * (1.0 + n_leaves.ln()));
    let mut tau = (opts.smoothing_start * scale).max(tau_final);
    let mut x = vec![0.0; obj.dim()];
    let mut best = (obj.eval(&x, 0.0, false).value, x.clone());
    let mut lip = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut weights = obj.eval(&x, tau, false).weights;

    if internal == 0 {
        converged = true;
    }
    while internal > 0 && iterations < opts.max_iter {
        let final_stage = tau <= tau_final;
        let stage_tol = if final_stage { 0.1 * tol } else { tau };
        let (stage_ok, used) = fista_stage(&obj, &mut x, tau, &mut lip, stage_tol, opts.max_iter - iterations);
        iterations += used;
        let exact = obj.eval(&x, 0.0, false).value;
        if exact < best.0 {
            best = (exact, x.clone());
        }
        weights = obj.eval(&x, tau, false).weights;
        if final_stage {
            converged = stage_ok;
            break;
        }
        tau = (tau * opts.smoothing_decay).max(tau_final);
    }
    let schedule = schedule_from(market, &best.1, internal);
    let value = required_cash(market, &schedule, payoff)?;
    Ok(PrimalSolution { schedule, value, iterations, converged, leaf_weights: weights })
}

/// Accelerated projected gradient with backtracking and function-value
/// restarts. Stops once the gradient mapping, scaled by the distance
/// travelled from the origin, falls below `tol`, or once a window of
/// iterations lowers the smoothed value by less than `tol / 1000`.
const STALL_WINDOW: usize = 500;

fn fista_stage(obj: &Smoothed, x: &mut Vec<f64>, tau: f64, lip: &mut f64, tol: f64, budget: usize) -> (bool, usize) {
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut fx = obj.eval(x, tau, false).value;
    let mut used = 0;
    let mut window_start = fx;
    while used < budget {
        used += 1;
        if used % STALL_WINDOW == 0 {
            if window_start - fx < 1e-3 * tol {
                return (true, used);
            }
            window_start = fx;
        }
        let ey = obj.eval(&y, tau, true);
        let mut next;
        loop {
            next = y.iter().zip(&ey.grad).map(|(v, g)| v - g / *lip).collect::<Vec<f64>>();
            project(&mut next);
            let fnext = obj.eval(&next, tau, false).value;
            let mut lin = ey.value;
            let mut sq = 0.0;
            for i in 0..next.len() {
                let d = next[i] - y[i];
                lin += ey.grad[i] * d;
                sq += d * d;
            }
            if fnext <= lin + 0.5 * *lip * sq + 1e-15 * ey.value.abs().max(1.0) {
                break;
            }
            *lip *= 2.0;
        }
        let fnext = obj.eval(&next, tau, false).value;
        let step: f64 = next.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let radius = 1.0 + next.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mapping = *lip * step;
        if fnext > fx {
            // restart momentum from the last iterate
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = next.iter().zip(x.iter()).map(|(a, b)| a + beta * (a - b)).collect();
        *x = next;
        fx = fnext;
        t = t_next;
        *lip = (*lip * 0.9).max(1e-12);
        if mapping * radius <= tol {
            return (true, used);
        }
    }
    (false, used)
}

/// Minimal super-replication cost over liquidating schedules.
///
/// Returns `NonConvergence` (carrying the best report) when the iteration
/// budget runs out; the value in that report is still an upper bound.
pub fn primal_solve(market: &Market, payoff: &[f64], opts: &SolverOptions) -> Result<PriceReport, SolverError> {
    let sol = primal_core(market, payoff, opts)?;
    let mut report = PriceReport::empty(problem_scale(market, payoff));
    report.primal_value = Some(sol.value);
    report.strategy = Some(sol.schedule);
    report.primal_iterations = sol.iterations;
    report.primal_converged = sol.converged;
    if !sol.converged {
        return Err(SolverError::NonConvergence { report: Box::new(report) });
    }
    Ok(report)
}

/// Largest instance the exhaustive search accepts.
pub const ORACLE_MAX_PERIODS: usize = 3;
pub const ORACLE_MAX_BRANCHING: usize = 3;
pub const ORACLE_MAX_GRID: usize = 1000;
pub const ORACLE_MAX_COMBINATIONS: usize = 2_000_000;

/// Exhaustive search over net trades drawn from `trade_grid` at every
/// internal node, with forced liquidation at the leaves. Costs are
/// evaluated by the direct execution rule, independently of the smoothed
/// objective used by [`primal_solve`].
pub fn brute_force_oracle(market: &Market, payoff: &[f64], trade_grid: &[f64]) -> Result<f64, SolverError> {
    Ok(brute_force_search(market, payoff, trade_grid)?.0)
}

/// As [`brute_force_oracle`], also returning the minimizing schedule.
pub fn brute_force_search(
    market: &Market,
    payoff: &[f64],
    trade_grid: &[f64],
) -> Result<(f64, TradeSchedule), SolverError> {
    duality::validate_payoff(market, payoff)?;
    let tree = market.tree();
    if tree.depth() > ORACLE_MAX_PERIODS {
        return Err(SolverError::InstanceTooLarge(format!("{} periods", tree.depth())));
    }
    if tree.max_branching() > ORACLE_MAX_BRANCHING {
        return Err(SolverError::InstanceTooLarge(format!("branching {}", tree.max_branching())));
    }
    if trade_grid.is_empty() || trade_grid.len() > ORACLE_MAX_GRID {
        return Err(SolverError::InstanceTooLarge(format!("{} grid points", trade_grid.len())));
    }
    let k = tree.internal().len();
    let combos = (trade_grid.len() as f64).powi(k as i32);
    if combos > ORACLE_MAX_COMBINATIONS as f64 {
        return Err(SolverError::InstanceTooLarge(format!("{combos} combinations")));
    }
    let x0 = market.params().x0;
    let mut idx = vec![0usize; k];
    let mut best: Option<(f64, TradeSchedule)> = None;
    loop {
        let net: Vec<f64> = idx.iter().map(|&j| trade_grid[j]).collect();
        let s = TradeSchedule::liquidating(tree, &net, x0);
        let v = required_cash(market, &s, payoff)?;
        if best.as_ref().map_or(true, |b| v < b.0) {
            best = Some((v, s));
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == k {
                return Ok(best.expect("at least one combination"));
            }
            idx[pos] += 1;
            if idx[pos] < trade_grid.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// `(Q, alpha)` with the best band martingale, or a uniform raise of
/// `alpha` that makes `guess` (projected to a `Q`-martingale) feasible.
fn repair(market: &Market, q: &NodeMeasure, alpha: &[f64], guess_leaves: &[f64]) -> Option<DualCertificate> {
    let tree = market.tree();
    let liq = market.liquidity();
    let x0 = market.params().x0;
    let prices = tree.prices();
    let choice = |anchor: f64| {
        if x0 > 0.0 {
            RootChoice::Lowest
        } else if x0 < 0.0 {
            RootChoice::Highest
        } else {
            RootChoice::Closest(anchor)
        }
    };
    let select = |alpha: &[f64], anchor: f64| -> Option<Vec<f64>> {
        let b = band_width(market, q, alpha);
        let lo: Vec<f64> = prices.iter().zip(&b).map(|(p, b)| p - b).collect();
        let hi: Vec<f64> = prices.iter().zip(&b).map(|(p, b)| p + b).collect();
        match martingale_in_band(tree, q, &lo, &hi, choice(anchor)) {
            Ok(BandSelection::Feasible { martingale }) => Some(martingale),
            _ => None,
        }
    };
    let accept = |cert: DualCertificate| -> Option<DualCertificate> {
        match check_feasibility(market, &cert) {
            Ok(r) if r.feasible => Some(cert),
            _ => None,
        }
    };
    let guess = conditional_expectation(tree, q, guess_leaves).ok()?;
    if let Some(m) = select(alpha, guess[0]) {
        if let Some(c) = accept(DualCertificate { measure: q.clone(), martingale: m, alpha: alpha.to_vec() }) {
            return Some(c);
        }
    }
    let b = band_width(market, q, alpha);
    // raising alpha by eps everywhere widens the band at node n by eps / rho_n
    let eps = (0..tree.len())
        .map(|i| ((prices[i] - guess[i]).abs() - b[i]).max(0.0) * liq.rho[i])
        .fold(0.0f64, f64::max);
    let raised: Vec<f64> = alpha.iter().map(|a| a + eps * (1.0 + 1e-12) + 1e-13 * market.scale()).collect();
    let m = select(&raised, guess[0]).unwrap_or(guess);
    accept(DualCertificate { measure: q.clone(), martingale: m, alpha: raised })
}

fn cert_value(market: &Market, cert: &DualCertificate, payoff: &[f64]) -> f64 {
    dual_value_unchecked(market, &cert.measure, &cert.alpha, cert.martingale[0], payoff).value
}

/// Unconstrained parametrization of a certificate: sibling logits, `alpha`
/// and terminal values of `M`.
struct DualVars {
    logits: Vec<f64>,
    alpha: Vec<f64>,
    m_leaves: Vec<f64>,
}

impl DualVars {
    fn from_cert(market: &Market, cert: &DualCertificate) -> Self {
        let tree = market.tree();
        Self {
            logits: cert.measure.transitions().iter().map(|q| q.max(1e-30).ln()).collect(),
            alpha: cert.alpha.clone(),
            m_leaves: cert.martingale[tree.leaves()].to_vec(),
        }
    }

    fn flat(&self) -> Vec<f64> {
        [self.logits.as_slice(), &self.alpha, &self.m_leaves].concat()
    }

    fn from_flat(v: &[f64], n: usize) -> Self {
        Self { logits: v[..n].to_vec(), alpha: v[n..2 * n].to_vec(), m_leaves: v[2 * n..].to_vec() }
    }

    fn measure(&self, market: &Market) -> NodeMeasure {
        let tree = market.tree();
        let mut trans = vec![1.0; tree.len()];
        for i in tree.internal() {
            let kids = tree.children(i);
            let top = kids.clone().map(|c| self.logits[c]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = kids.clone().map(|c| (self.logits[c] - top).exp()).sum();
            for c in kids {
                trans[c] = (self.logits[c] - top).exp() / sum;
            }
        }
        NodeMeasure::new(tree, trans).expect("softmax yields a simplex")
    }
}

/// Penalized dual surrogate and its gradient in the flat parametrization.
fn surrogate(market: &Market, payoff: &[f64], v: &DualVars, penalty: f64) -> (f64, Vec<f64>) {
    let tree = market.tree();
    let liq = market.liquidity();
    let p = market.params();
    let n = tree.len();
    let q = v.measure(market);
    let qt = q.transitions();
    let prob = q.node_probabilities(tree);
    let c: Vec<f64> = (0..n).map(|i| liq.eta_per_share(tree, i)).collect();
    let leaf0 = tree.leaves().start;
    let mut m = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut mass = vec![0.0; n];
    for i in (0..n).rev() {
        if tree.is_leaf(i) {
            m[i] = v.m_leaves[i - leaf0];
            s[i] = v.alpha[i] * liq.kappa[i];
            mass[i] = liq.kappa[i];
        } else {
            for ch in tree.children(i) {
                m[i] += qt[ch] * m[ch];
                s[i] += qt[ch] * (v.alpha[i] * liq.mu_in[ch] + s[ch]);
                mass[i] += qt[ch] * liq.mu_in[ch];
            }
        }
    }
    let mut value = -p.x0 * m[0] - 0.5 * p.iota * p.x0 * p.x0;
    let mut m_bar = vec![0.0; n];
    let mut s_bar = vec![0.0; n];
    let mut mass_bar = vec![0.0; n];
    let mut prob_bar = vec![0.0; n];
    let mut alpha_bar = vec![0.0; n];
    let mut q_bar = vec![0.0; n];
    m_bar[0] -= p.x0;
    for i in 0..n {
        let d = v.alpha[i] - p.zeta0;
        value -= 0.5 * prob[i] * d * d * mass[i];
        alpha_bar[i] -= prob[i] * d * mass[i];
        prob_bar[i] -= 0.5 * d * d * mass[i];
        mass_bar[i] -= 0.5 * prob[i] * d * d;
        let price = tree.node(i).price;
        let viol = (price - m[i]).abs() - c[i] * s[i];
        if viol > 0.0 {
            value -= 0.5 * penalty * viol * viol;
            m_bar[i] -= penalty * viol * (m[i] - price).signum();
            s_bar[i] += penalty * viol * c[i];
        }
    }
    for (l, h) in tree.leaves().zip(payoff) {
        value += prob[l] * h;
        prob_bar[l] += h;
    }
    for i in tree.internal() {
        for ch in tree.children(i) {
            m_bar[ch] += qt[ch] * m_bar[i];
            q_bar[ch] += m[ch] * m_bar[i];
            s_bar[ch] += qt[ch] * s_bar[i];
            alpha_bar[i] += s_bar[i] * qt[ch] * liq.mu_in[ch];
            q_bar[ch] += s_bar[i] * (v.alpha[i] * liq.mu_in[ch] + s[ch]) + mass_bar[i] * liq.mu_in[ch];
        }
    }
    let mut mt_bar = vec![0.0; tree.n_leaves()];
    for l in tree.leaves() {
        mt_bar[l - leaf0] = m_bar[l];
        alpha_bar[l] += s_bar[l] * liq.kappa[l];
    }
    for i in (1..n).rev() {
        let par = tree.parent(i).expect("non-root");
        prob_bar[par] += prob_bar[i] * qt[i];
        q_bar[i] += prob_bar[i] * prob[par];
    }
    let mut logit_bar = vec![0.0; n];
    for i in tree.internal() {
        let kids = tree.children(i);
        let mean: f64 = kids.clone().map(|ch| qt[ch] * q_bar[ch]).sum();
        for ch in kids {
            logit_bar[ch] = qt[ch] * (q_bar[ch] - mean);
        }
    }
    let grad = [logit_bar, alpha_bar, mt_bar].concat();
    (value, grad)
}

/// Best-effort maximization of the dual objective from a feasible start.
///
/// Every certificate kept is exactly feasible and the reported objective
/// never drops below the starting one.
pub fn dual_ascent(
    market: &Market,
    payoff: &[f64],
    init: &DualCertificate,
    opts: &SolverOptions,
) -> Result<PriceReport, SolverError> {
    opts.validate()?;
    duality::validate_payoff(market, payoff)?;
    let feas = check_feasibility(market, init)?;
    if !feas.feasible {
        return Err(SolverError::InfeasibleInit { node: feas.worst_node, violation: feas.worst_violation });
    }
    let scale = problem_scale(market, payoff);
    let n = market.tree().len();
    let mut best = (cert_value(market, init, payoff), init.clone());
    let mut vars = DualVars::from_cert(market, init).flat();
    // variable blocks live on different scales: logits are unitless, alpha
    // and M are prices
    let precond: Vec<f64> = (0..vars.len()).map(|i| if i < n { 1.0 } else { scale }).collect();
    let mut penalty = 1.0 / scale;
    let mut step = 1e-2;
    let mut iterations = 0;
    let mut stall = 0;
    let mut converged = false;
    let phase_len = (opts.dual_max_iter / 8).max(1);
    while iterations < opts.dual_max_iter {
        iterations += 1;
        let (f, g) = surrogate(market, payoff, &DualVars::from_flat(&vars, n), penalty);
        let gnorm2: f64 = g.iter().zip(&precond).map(|(g, p)| g * g * p).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = vars.iter().zip(&g).zip(&precond).map(|((x, g), p)| x + step * p * g).collect();
            let (ft, _) = surrogate(market, payoff, &DualVars::from_flat(&trial, n), penalty);
            if ft >= f + 0.3 * step * gnorm2 {
                vars = trial;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        let dv = DualVars::from_flat(&vars, n);
        let q = dv.measure(market);
        let mut improved = false;
        if let Some(cert) = repair(market, &q, &dv.alpha, &dv.m_leaves) {
            let v = cert_value(market, &cert, payoff);
            if v > best.0 {
                improved = v > best.0 + 1e-12 * scale;
                best = (v, cert);
            }
        }
        stall = if improved { 0 } else { stall + 1 };
        if iterations % phase_len == 0 || !accepted {
            penalty *= 10.0;
            step = 1e-2 / penalty.max(1.0);
        }
        if stall >= 4 * phase_len && penalty > 1e8 / scale {
            converged = true;
            break;
        }
    }
    let mut report = PriceReport::empty(scale);
    report.dual_value = Some(best.0);
    report.certificate = Some(best.1);
    report.dual_iterations = iterations;
    report.dual_converged = converged;
    Ok(report)
}

/// Certificate read off a primal solution: `Q` from the active-leaf
/// weights of the smoothed maximum, `alpha` from the spread path.
fn primal_certificate(market: &Market, sol: &PrimalSolution) -> Option<DualCertificate> {
    let tree = market.tree();
    let q = NodeMeasure::from_leaf_weights(tree, &sol.leaf_weights).ok()?;
    let st = wealth::eta_path(market, &sol.schedule).ok()?;
    repair(market, &q, &st.eta, &tree.leaf_prices())
}

/// Runs both solvers and reports the gap between them.
pub fn gap_report(market: &Market, payoff: &[f64], opts: &SolverOptions) -> Result<PriceReport, SolverError> {
    let sol = primal_core(market, payoff, opts)?;
    let tree = market.tree();
    let mut starts = vec![DualCertificate::running_max(market, tree.reference_measure())];
    let fl = DualCertificate::frictionless(market);
    if check_feasibility(market, &fl)?.feasible {
        starts.push(fl);
    }
    if let Some(c) = primal_certificate(market, &sol) {
        starts.push(c);
    }
    let start = starts
        .into_iter()
        .map(|c| (cert_value(market, &c, payoff), c))
        .fold(None::<(f64, DualCertificate)>, |acc, c| match acc {
            Some(a) if a.0 >= c.0 => Some(a),
            _ => Some(c),
        })
        .expect("running-max start always present")
        .1;
    let mut report = dual_ascent(market, payoff, &start, opts)?;
    let dual = report.dual_value.expect("dual side ran");
    let gap = sol.value - dual;
    if gap < -1e-9 * report.scale {
        return Err(SolverError::NegativeGap { primal: sol.value, dual });
    }
    report.primal_value = Some(sol.value);
    report.strategy = Some(sol.schedule);
    report.primal_iterations = sol.iterations;
    report.primal_converged = sol.converged;
    report.gap = Some(gap);
    if !sol.converged {
        return Err(SolverError::NonConvergence { report: Box::new(report) });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ImpactParams, TimeGrid};
    use crate::tree::{ScenarioTree, TreeBuilder};

    pub(crate) fn binary_call() -> (Market, Vec<f64>) {
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let mut b = TreeBuilder::new(grid);
        let root = b.root(100.0, 10.0, 0.0);
        b.child(root, 0.5, 110.0, 10.0, 0.0);
        b.child(root, 0.5, 90.0, 10.0, 0.0);
        let m = Market::new_unchecked(b.build().unwrap(), ImpactParams::default()).unwrap();
        (m, vec![10.0, 0.0])
    }

    fn flat_chain(h: f64) -> (Market, Vec<f64>) {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let t = ScenarioTree::path(g, &[50.0; 3], &[10.0; 3], &[1.0; 3]).unwrap();
        (Market::new(t, ImpactParams::default()).unwrap(), vec![h])
    }

    fn finite_difference(obj: &Smoothed, x: &[f64], tau: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-6;
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (obj.eval(&a, tau, false).value - obj.eval(&b, tau, false).value) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let t = ScenarioTree::binomial(grid, 100.0, 1.1, 0.92, 0.4, 8.0, 0.7).unwrap();
        let m = Market::new(t, ImpactParams { zeta0: 0.2, x0: 0.3, iota: 0.1, xi0: 0.0 }).unwrap();
        let payoff = vec![3.0, 1.0, 0.5, 0.0];
        let obj = Smoothed { market: &m, payoff: &payoff, internal: m.tree().internal().len() };
        let x = vec![0.4, 0.1, 0.7, 0.2, 0.5, 0.05];
        let e = obj.eval(&x, 0.5, true);
        for (a, b) in e.grad.iter().zip(finite_difference(&obj, &x, 0.5)) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn binary_call_primal() {
        let (m, h) = binary_call();
        let r = primal_solve(&m, &h, &SolverOptions::default()).unwrap();
        let v = r.primal_value.unwrap();
        assert!((v - 5.05).abs() < 1e-4, "{v}");
        let s = r.strategy.unwrap();
        assert!((s.net(0) - 0.5).abs() < 1e-2);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let oracle = brute_force_oracle(&m, &h, &grid).unwrap();
        assert!((oracle - 5.05).abs() < 1e-9);
    }

    #[test]
    fn trivial_chains() {
        for h in [0.0, 1.0] {
            let (m, payoff) = flat_chain(h);
            let r = primal_solve(&m, &payoff, &SolverOptions::default()).unwrap();
            assert!((r.primal_value.unwrap() - h).abs() < 1e-6);
            assert!(!r.strategy.unwrap().has_trades());
            let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
            assert!((brute_force_oracle(&m, &payoff, &grid).unwrap() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let t = ScenarioTree::binomial(grid, 100.0, 1.1, 0.9, 0.5, 10.0, 1.0).unwrap();
        let m = Market::new(t, ImpactParams::default()).unwrap();
        let h = vec![0.0; m.tree().n_leaves()];
        assert!(matches!(brute_force_oracle(&m, &h, &[0.0]), Err(SolverError::InstanceTooLarge(_))));
    }

    #[test]
    fn binary_call_dual_from_flat_start() {
        let (m, h) = binary_call();
        let init = DualCertificate {
            measure: m.tree().reference_measure(),
            martingale: m.tree().prices(),
            alpha: vec![0.0; 3],
        };
        assert_eq!(cert_value(&m, &init, &h), 5.0);
        let r = dual_ascent(&m, &h, &init, &SolverOptions::default()).unwrap();
        let d = r.dual_value.unwrap();
        assert!(d > 5.0 && d <= 5.05 + 1e-9, "{d}");
        assert!(check_feasibility(&m, r.certificate.as_ref().unwrap()).unwrap().feasible);
    }

    #[test]
    fn infeasible_start_rejected() {
        let (m, h) = binary_call();
        let bad = DualCertificate {
            measure: m.tree().reference_measure(),
            martingale: vec![0.0; 3],
            alpha: vec![0.0; 3],
        };
        assert!(matches!(dual_ascent(&m, &h, &bad, &SolverOptions::default()), Err(SolverError::InfeasibleInit { .. })));
    }

    #[test]
    fn binary_call_gap() {
        let (m, h) = binary_call();
        let r = gap_report(&m, &h, &SolverOptions::default()).unwrap();
        let gap = r.gap.unwrap();
        assert!((-1e-9..=0.05).contains(&gap), "{gap}");
        assert!(r.dual_value.unwrap() >= 5.0);
    }

    #[test]
    fn zero_claim_has_zero_gap() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let t = ScenarioTree::binomial(grid, 100.0, 1.1, 0.9, 0.5, 10.0, 1.0).unwrap();
        let m = Market::new(t, ImpactParams::default()).unwrap();
        let h = vec![0.0; 4];
        let r = gap_report(&m, &h, &SolverOptions::default()).unwrap();
        assert!(r.primal_value.unwrap().abs() < 1e-9);
        assert!(r.gap.unwrap().abs() < 1e-9);
    }

    #[test]
    fn initial_spread_does_not_enter_the_cash_price() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let t = ScenarioTree::binomial(grid, 100.0, 1.1, 0.9, 0.5, 10.0, 1.0).unwrap();
        let params = ImpactParams { zeta0: 0.5, ..ImpactParams::default() };
        let m = Market::new(t, params).unwrap();
        let h = vec![0.0; 4];
        let r = primal_solve(&m, &h, &SolverOptions::default()).unwrap();
        assert!(r.primal_value.unwrap().abs() < 1e-9);
        let grid: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.5).collect();
        assert!(brute_force_oracle(&m, &h, &grid).unwrap().abs() < 1e-12);
    }

    #[test]
    fn refined_binomial_call_gap() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let t = ScenarioTree::binomial(grid, 100.0, 1.05, 1.0 / 1.05, 0.5, 10.0, 0.0).unwrap();
        let m = Market::new_unchecked(t, ImpactParams::default()).unwrap();
        let h: Vec<f64> = m.tree().leaf_prices().iter().map(|p| (p - 100.0).max(0.0)).collect();
        let r = gap_report(&m, &h, &SolverOptions::default()).unwrap();
        let (p, gap) = (r.primal_value.unwrap(), r.gap.unwrap());
        assert!(gap <= 0.05 * p, "primal {p} gap {gap}");
    }
}
