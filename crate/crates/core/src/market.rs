//! Market primitives for the transient impact model.
//!
//! Depth `delta` and resilience `r` are given per grid point (deterministic
//! markets) or per tree node (stochastic liquidity). From them we derive
//! the resilience factor `rho`, the weight `kappa = delta / rho^2` and the
//! liquidity measure `mu`: mass `kappa(t_{i-1}) - kappa(t_i)` on each grid
//! interval plus an atom `kappa(T)` at the horizon. The interval mass is
//! paired with the value a process holds at the start of the interval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{ScenarioTree, TreeError};

/// Relative margin by which `kappa` has to drop on every step.
pub const MONOTONICITY_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("time grid needs at least 2 points, got {0}")]
    GridTooShort(usize),
    #[error("time grid must start at 0, got {0}")]
    GridStart(f64),
    #[error("time grid is not strictly increasing at index {0}")]
    GridNotIncreasing(usize),
    #[error("market depth must be positive, got {value} at {index}")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("resilience must be nonnegative, got {value} at {index}")]
    NegativeResilience { index: usize, value: f64 },
    #[error("kappa is not strictly decreasing at step {index}: {prev} -> {next}")]
    MonotonicityViolation { index: usize, prev: f64, next: f64 },
    #[error("{field}: expected {expected} values, got {got}")]
    LengthMismatch { field: &'static str, expected: usize, got: usize },
    #[error("parameter {name} = {value} is out of range")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("market violates the liquidity assumptions: {0}")]
    Assumptions(String),
    #[error("invalid tree: {0}")]
    Tree(String),
}

impl From<TreeError> for MarketError {
    fn from(e: TreeError) -> Self {
        MarketError::Tree(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = MarketError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        TimeGrid::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self, MarketError> {
        if times.len() < 2 {
            return Err(MarketError::GridTooShort(times.len()));
        }
        if times[0] != 0.0 {
            return Err(MarketError::GridStart(times[0]));
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) || !times[i].is_finite() {
                return Err(MarketError::GridNotIncreasing(i));
            }
        }
        Ok(Self { times })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self, MarketError> {
        Self::new((0..=steps).map(|i| horizon * i as f64 / steps.max(1) as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of steps N (points minus one).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Length of the step leaving point `i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// Splits every step into `factor` equal sub-steps.
    pub fn refine(&self, factor: usize) -> TimeGrid {
        let mut times = Vec::with_capacity(self.steps() * factor + 1);
        for i in 0..self.steps() {
            for k in 0..factor {
                times.push(self.times[i] + self.dt(i) * k as f64 / factor as f64);
            }
        }
        times.push(self.horizon());
        TimeGrid { times }
    }
}

/// Deterministic depth and resilience, one value per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquiditySpec {
    pub delta: Vec<f64>,
    pub r: Vec<f64>,
}

impl LiquiditySpec {
    pub fn new(grid: &TimeGrid, delta: Vec<f64>, r: Vec<f64>) -> Result<Self, MarketError> {
        for (field, len) in [("delta", delta.len()), ("r", r.len())] {
            if len != grid.len() {
                return Err(MarketError::LengthMismatch { field, expected: grid.len(), got: len });
            }
        }
        Ok(Self { delta, r })
    }

    pub fn constant(grid: &TimeGrid, delta: f64, r: f64) -> Self {
        Self { delta: vec![delta; grid.len()], r: vec![r; grid.len()] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactParams {
    /// Permanent impact per share.
    pub iota: f64,
    /// Initial half-spread.
    pub zeta0: f64,
    /// Initial position in shares.
    pub x0: f64,
    /// Initial cash.
    pub xi0: f64,
}

impl Default for ImpactParams {
    fn default() -> Self {
        Self { iota: 0.0, zeta0: 0.0, x0: 0.0, xi0: 0.0 }
    }
}

impl ImpactParams {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.iota >= 0.0) || !self.iota.is_finite() {
            return Err(MarketError::InvalidParam { name: "iota", value: self.iota });
        }
        if !(self.zeta0 >= 0.0) || !self.zeta0.is_finite() {
            return Err(MarketError::InvalidParam { name: "zeta0", value: self.zeta0 });
        }
        for (name, value) in [("x0", self.x0), ("xi0", self.xi0)] {
            if !value.is_finite() {
                return Err(MarketError::InvalidParam { name, value });
            }
        }
        Ok(())
    }
}

/// `rho(t_i) = exp(sum_{j<i} r(t_j) (t_{j+1} - t_j))`.
pub fn build_rho(grid: &TimeGrid, r: &[f64]) -> Result<Vec<f64>, MarketError> {
    if r.len() != grid.len() {
        return Err(MarketError::LengthMismatch { field: "r", expected: grid.len(), got: r.len() });
    }
    if let Some((index, &value)) = r.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(MarketError::NegativeResilience { index, value });
    }
    let mut integral = 0.0;
    let mut rho = Vec::with_capacity(grid.len());
    rho.push(1.0);
    for i in 1..grid.len() {
        integral += r[i - 1] * grid.dt(i - 1);
        rho.push(integral.exp());
    }
    Ok(rho)
}

/// `kappa = delta / rho^2`, point-wise.
pub fn build_kappa(delta: &[f64], rho: &[f64]) -> Result<Vec<f64>, MarketError> {
    if delta.len() != rho.len() {
        return Err(MarketError::LengthMismatch { field: "delta", expected: rho.len(), got: delta.len() });
    }
    if let Some((index, &value)) = delta.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(MarketError::NonPositiveDepth { index, value });
    }
    Ok(delta.iter().zip(rho).map(|(d, p)| d / (p * p)).collect())
}

/// The liquidity measure along one path: `interior[i-1]` is the mass of the
/// step from `t_{i-1}` to `t_i`, `atom` the point mass at `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuWeights {
    pub interior: Vec<f64>,
    pub atom: f64,
}

impl MuWeights {
    /// Differences of `kappa` without checking their sign.
    pub fn from_kappa_unchecked(kappa: &[f64]) -> Self {
        let interior = kappa.windows(2).map(|w| w[0] - w[1]).collect();
        Self { interior, atom: kappa[kappa.len() - 1] }
    }

    pub fn total_mass(&self) -> f64 {
        self.interior.iter().sum::<f64>() + self.atom
    }
}

pub fn build_mu(kappa: &[f64]) -> Result<MuWeights, MarketError> {
    for i in 1..kappa.len() {
        if !strictly_drops(kappa[i - 1], kappa[i]) {
            return Err(MarketError::MonotonicityViolation { index: i, prev: kappa[i - 1], next: kappa[i] });
        }
    }
    if !(kappa[kappa.len() - 1] > 0.0) {
        return Err(MarketError::NonPositiveDepth { index: kappa.len() - 1, value: kappa[kappa.len() - 1] });
    }
    Ok(MuWeights::from_kappa_unchecked(kappa))
}

fn strictly_drops(prev: f64, next: f64) -> bool {
    prev - next > MONOTONICITY_EPS * prev.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "clause", rename_all = "snake_case")]
pub enum AssumptionViolation {
    NonPositiveDepth { node: usize, value: f64 },
    NegativeResilience { node: usize, value: f64 },
    KappaNotDecreasing { node: usize, parent_kappa: f64, kappa: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub passed: bool,
    pub violations: Vec<AssumptionViolation>,
    /// Extremes of `delta / rho` over all nodes.
    pub depth_over_rho_min: f64,
    pub depth_over_rho_max: f64,
    /// Smallest relative drop `(kappa_prev - kappa) / kappa_prev` over all steps.
    pub min_relative_kappa_drop: f64,
}

/// Checks depth positivity, nonnegative resilience and strict decrease of
/// `kappa` for a deterministic market. Never fails; violations are listed.
pub fn validate_assumptions(grid: &TimeGrid, liquidity: &LiquiditySpec) -> AssumptionReport {
    let n = grid.len();
    let delta = pad(&liquidity.delta, n, 1.0);
    let r = pad(&liquidity.r, n, 0.0);
    let parents: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
    let dts: Vec<f64> = (0..n).map(|i| if i + 1 < n { grid.dt(i) } else { 0.0 }).collect();
    assumption_report(&delta, &r, &parents, &dts)
}

/// Node-wise version of [`validate_assumptions`] for a scenario tree.
pub fn validate_tree_assumptions(tree: &ScenarioTree) -> AssumptionReport {
    let delta: Vec<f64> = tree.nodes().iter().map(|n| n.delta).collect();
    let r: Vec<f64> = tree.nodes().iter().map(|n| n.r).collect();
    let parents: Vec<Option<usize>> = tree.nodes().iter().map(|n| n.parent).collect();
    let grid = tree.grid();
    let dts: Vec<f64> = tree
        .nodes()
        .iter()
        .map(|n| if n.level < grid.steps() { grid.dt(n.level) } else { 0.0 })
        .collect();
    assumption_report(&delta, &r, &parents, &dts)
}

fn pad(v: &[f64], n: usize, fill: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(n, fill);
    out
}

// `parents` must list every parent before its children; `dts[i]` is the step
// leaving node i.
fn assumption_report(delta: &[f64], r: &[f64], parents: &[Option<usize>], dts: &[f64]) -> AssumptionReport {
    let mut violations = Vec::new();
    for (node, &value) in delta.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            violations.push(AssumptionViolation::NonPositiveDepth { node, value });
        }
    }
    for (node, &value) in r.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            violations.push(AssumptionViolation::NegativeResilience { node, value });
        }
    }
    let n = delta.len();
    let mut log_rho = vec![0.0; n];
    let mut kappa = vec![0.0; n];
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = 0.0f64;
    let mut min_drop = f64::INFINITY;
    for i in 0..n {
        if let Some(p) = parents[i] {
            log_rho[i] = log_rho[p] + r[p].max(0.0) * dts[p];
        }
        let rho = log_rho[i].exp();
        kappa[i] = delta[i] / (rho * rho);
        let ratio = delta[i] / rho;
        ratio_min = ratio_min.min(ratio);
        ratio_max = ratio_max.max(ratio);
        if let Some(p) = parents[i] {
            let drop = (kappa[p] - kappa[i]) / kappa[p].abs();
            min_drop = min_drop.min(drop);
            if !strictly_drops(kappa[p], kappa[i]) {
                violations.push(AssumptionViolation::KappaNotDecreasing {
                    node: i,
                    parent_kappa: kappa[p],
                    kappa: kappa[i],
                });
            }
        }
    }
    AssumptionReport {
        passed: violations.is_empty(),
        violations,
        depth_over_rho_min: ratio_min,
        depth_over_rho_max: ratio_max,
        min_relative_kappa_drop: min_drop,
    }
}

/// Per-node `rho`, `kappa` and the mass of the step entering each node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLiquidity {
    pub rho: Vec<f64>,
    pub kappa: Vec<f64>,
    /// `kappa(parent) - kappa(node)`; zero at the root.
    pub mu_in: Vec<f64>,
}

impl NodeLiquidity {
    pub fn from_tree(tree: &ScenarioTree) -> Result<Self, MarketError> {
        let n = tree.len();
        let grid = tree.grid();
        let mut rho = vec![1.0; n];
        let mut kappa = vec![0.0; n];
        let mut mu_in = vec![0.0; n];
        for (i, nd) in tree.nodes().iter().enumerate() {
            if !(nd.delta > 0.0) {
                return Err(MarketError::NonPositiveDepth { index: i, value: nd.delta });
            }
            if !(nd.r >= 0.0) {
                return Err(MarketError::NegativeResilience { index: i, value: nd.r });
            }
            if let Some(p) = nd.parent {
                let parent = tree.node(p);
                rho[i] = rho[p] * (parent.r * grid.dt(parent.level)).exp();
            }
            kappa[i] = nd.delta / (rho[i] * rho[i]);
            if let Some(p) = nd.parent {
                mu_in[i] = kappa[p] - kappa[i];
            }
        }
        Ok(Self { rho, kappa, mu_in })
    }

    /// `rho / delta` at node `i`: the shift of eta per traded share.
    pub fn eta_per_share(&self, tree: &ScenarioTree, i: usize) -> f64 {
        self.rho[i] / tree.node(i).delta
    }
}

/// A scenario tree together with impact parameters and derived liquidity.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    tree: ScenarioTree,
    params: ImpactParams,
    liquidity: NodeLiquidity,
}

impl Market {
    /// Builds the market and insists on strictly decreasing `kappa`.
    pub fn new(tree: ScenarioTree, params: ImpactParams) -> Result<Self, MarketError> {
        let report = validate_tree_assumptions(&tree);
        if !report.passed {
            let list: Vec<String> = report.violations.iter().map(|v| format!("{v:?}")).collect();
            return Err(MarketError::Assumptions(list.join("; ")));
        }
        Self::new_unchecked(tree, params)
    }

    /// Skips the monotonicity requirement on `kappa`. Depth must still be
    /// positive and resilience nonnegative.
    pub fn new_unchecked(tree: ScenarioTree, params: ImpactParams) -> Result<Self, MarketError> {
        params.validate()?;
        let liquidity = NodeLiquidity::from_tree(&tree)?;
        Ok(Self { tree, params, liquidity })
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn params(&self) -> &ImpactParams {
        &self.params
    }

    pub fn liquidity(&self) -> &NodeLiquidity {
        &self.liquidity
    }

    pub fn with_params(&self, params: ImpactParams) -> Result<Self, MarketError> {
        params.validate()?;
        Ok(Self { tree: self.tree.clone(), params, liquidity: self.liquidity.clone() })
    }

    pub fn delta0(&self) -> f64 {
        self.tree.node(0).delta
    }

    /// `1 + sup |P|`, the magnitude used for relative tolerances.
    pub fn scale(&self) -> f64 {
        1.0 + self.tree.sup_abs_price()
    }

    /// The liquidity measure along the path ending at `leaf`.
    pub fn mu_along(&self, leaf: usize) -> MuWeights {
        let path = self.tree.path_to(leaf);
        let kappa: Vec<f64> = path.iter().map(|&i| self.liquidity.kappa[i]).collect();
        MuWeights::from_kappa_unchecked(&kappa)
    }
}

/// A scalar broadcast over the grid or one value per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrSeries {
    Scalar(f64),
    Series(Vec<f64>),
}

impl ScalarOrSeries {
    pub fn expand(&self, n: usize, field: &'static str) -> Result<Vec<f64>, MarketError> {
        match self {
            ScalarOrSeries::Scalar(v) => Ok(vec![*v; n]),
            ScalarOrSeries::Series(v) if v.len() == n => Ok(v.clone()),
            ScalarOrSeries::Series(v) => Err(MarketError::LengthMismatch { field, expected: n, got: v.len() }),
        }
    }
}

/// The market file: grid, deterministic liquidity and impact parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub grid: TimeGrid,
    pub delta: ScalarOrSeries,
    pub r: ScalarOrSeries,
    #[serde(default)]
    pub iota: f64,
    #[serde(default)]
    pub zeta0: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub xi0: f64,
}

impl MarketSpec {
    pub fn liquidity(&self) -> Result<LiquiditySpec, MarketError> {
        let n = self.grid.len();
        LiquiditySpec::new(&self.grid, self.delta.expand(n, "delta")?, self.r.expand(n, "r")?)
    }

    pub fn params(&self) -> ImpactParams {
        ImpactParams { iota: self.iota, zeta0: self.zeta0, x0: self.x0, xi0: self.xi0 }
    }
}
