//! Seeded random instances shared by the integration suites.
#![allow(dead_code)]

use impact_duality::market::{ImpactParams, Market, TimeGrid};
use impact_duality::strategy::TradeSchedule;
use impact_duality::tree::{NodeMeasure, ScenarioTree, TreeBuilder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng8 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut Rng8, steps: usize) -> TimeGrid {
    let mut t = vec![0.0];
    for _ in 0..steps {
        let last = *t.last().unwrap();
        t.push(last + rng.gen_range(0.01..0.2));
    }
    TimeGrid::new(t).unwrap()
}

/// Depth after a step that keeps `delta / rho^2` strictly decreasing: the
/// log-growth of depth stays below `2 r dt`.
fn next_depth(rng: &mut Rng8, delta: f64, r: f64, dt: f64) -> f64 {
    let g = rng.gen_range(-0.3..=1.5 * r * dt);
    delta * g.exp()
}

/// Depth and resilience per grid point meeting the standing assumptions.
pub fn liquidity_by_level(rng: &mut Rng8, grid: &TimeGrid) -> (Vec<f64>, Vec<f64>) {
    let n = grid.len();
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    let mut delta = vec![rng.gen_range(1.0..20.0)];
    for i in 1..n {
        let d = next_depth(rng, delta[i - 1], r[i - 1], grid.dt(i - 1));
        delta.push(d);
    }
    (delta, r)
}

pub struct TreeShape {
    pub steps: usize,
    pub max_branching: usize,
    /// Same depth and resilience on every node of a level.
    pub deterministic_liquidity: bool,
    pub vol: f64,
}

pub fn random_tree(rng: &mut Rng8, shape: &TreeShape) -> ScenarioTree {
    let grid = random_grid(rng, shape.steps);
    let (ld, lr) = liquidity_by_level(rng, &grid);
    let mut b = TreeBuilder::new(grid.clone());
    let p0 = rng.gen_range(20.0..150.0);
    let root = b.root(p0, ld[0], lr[0]);
    // (builder id, price, delta, r)
    let mut frontier = vec![(root, p0, ld[0], lr[0])];
    for lvl in 1..grid.len() {
        let mut next = Vec::new();
        for &(id, p, d, r) in &frontier {
            let k = rng.gen_range(1..=shape.max_branching);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = w.iter().sum();
            for wi in w {
                let price = p * (shape.vol * rng.gen_range(-1.0..1.0f64)).exp();
                let (cd, cr) = if shape.deterministic_liquidity {
                    (ld[lvl], lr[lvl])
                } else {
                    (next_depth(rng, d, r, grid.dt(lvl - 1)), rng.gen_range(0.1..2.0))
                };
                let c = b.child(id, wi / sum, price, cd, cr);
                next.push((c, price, cd, cr));
            }
        }
        frontier = next;
    }
    b.build().unwrap()
}

pub fn random_params(rng: &mut Rng8) -> ImpactParams {
    ImpactParams {
        iota: if rng.gen_bool(0.5) { rng.gen_range(0.0..0.5) } else { 0.0 },
        zeta0: if rng.gen_bool(0.7) { rng.gen_range(0.0..0.5) } else { 0.0 },
        x0: if rng.gen_bool(0.5) { rng.gen_range(-2.0..2.0) } else { 0.0 },
        xi0: rng.gen_range(-10.0..10.0),
    }
}

pub fn random_market(rng: &mut Rng8, shape: &TreeShape) -> Market {
    let tree = random_tree(rng, shape);
    let params = random_params(rng);
    Market::new(tree, params).expect("generated liquidity meets the assumptions")
}

/// Random gross trades at internal nodes and a flattening trade (plus an
/// optional round trip) at every leaf.
pub fn random_liquidating(rng: &mut Rng8, tree: &ScenarioTree, x0: f64) -> TradeSchedule {
    let k = tree.internal().len();
    let mut buys = vec![0.0; tree.len()];
    let mut sells = vec![0.0; tree.len()];
    for i in 0..k {
        if rng.gen_bool(0.5) {
            buys[i] = rng.gen_range(0.0..2.0);
        }
        if rng.gen_bool(0.4) {
            sells[i] = rng.gen_range(0.0..2.0);
        }
    }
    let net: Vec<f64> = (0..k).map(|i| buys[i] - sells[i]).collect();
    let mut s = TradeSchedule::liquidating(tree, &net, x0);
    s.buys[..k].copy_from_slice(&buys[..k]);
    s.sells[..k].copy_from_slice(&sells[..k]);
    for l in tree.leaves() {
        if rng.gen_bool(0.2) {
            let extra = rng.gen_range(0.0..0.5);
            s.buys[l] += extra;
            s.sells[l] += extra;
        }
    }
    s
}

pub fn random_measure(rng: &mut Rng8, tree: &ScenarioTree) -> NodeMeasure {
    let mut trans = vec![1.0; tree.len()];
    for i in tree.internal() {
        let kids = tree.children(i);
        let w: Vec<f64> = kids.clone().map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.01..1.0) }).collect();
        let sum: f64 = w.iter().sum();
        for (c, wi) in kids.zip(&w) {
            trans[c] = if sum > 0.0 { wi / sum } else { 1.0 / tree.children(i).len() as f64 };
        }
    }
    NodeMeasure::new(tree, trans).unwrap()
}

pub fn random_payoff(rng: &mut Rng8, tree: &ScenarioTree) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => vec![0.0; tree.n_leaves()],
        1 => {
            let k = tree.node(0).price * rng.gen_range(0.8..1.2);
            tree.leaf_prices().iter().map(|p| (p - k).max(0.0)).collect()
        }
        _ => (0..tree.n_leaves()).map(|_| rng.gen_range(0.0..10.0)).collect(),
    }
}
