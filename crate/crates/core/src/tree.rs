//! Finite scenario trees.
//!
//! Nodes are stored level by level and the children of every node occupy a
//! contiguous index range, so backward recursions are a reverse sweep over
//! the node vector and forward recursions a plain sweep. A deterministic
//! market is the degenerate tree with one child per node.
//!
//! Besides the structure this module carries node measures (transition
//! probabilities), conditional expectations, martingale checks, the
//! zero-drift tilt that turns `P + g` into a martingale, and the interval
//! recursion that selects a martingale inside a node-wise band.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{MarketError, TimeGrid};

/// Tolerance on the sum of transition probabilities at a node.
pub const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree has no root")]
    MissingRoot,
    #[error("tree has more than one root (nodes {0} and {1})")]
    MultipleRoots(usize, usize),
    #[error("node {node} refers to unknown parent {parent}")]
    UnknownParent { node: usize, parent: usize },
    #[error("node {node} is not reachable from the root")]
    Unreachable { node: usize },
    #[error("leaf {node} sits at level {level}, expected {expected}")]
    RaggedLeaves { node: usize, level: usize, expected: usize },
    #[error("tree depth {depth} does not match grid with {points} points")]
    GridMismatch { depth: usize, points: usize },
    #[error("node {node}: transition probability {value} is not in [0, 1]")]
    BadProbability { node: usize, value: f64 },
    #[error("children of node {node} have probabilities summing to {sum}")]
    NotSimplex { node: usize, sum: f64 },
    #[error("node {node}: non-finite {field}")]
    NonFinite { node: usize, field: &'static str },
    #[error("node {node}: t_index {given} disagrees with depth {expected}")]
    LevelMismatch { node: usize, given: usize, expected: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("node ids must be a permutation of 0..{0}")]
    BadIds(usize),
    #[error("node {node} has no child with a nonpositive and a nonnegative increment of P + g")]
    NoSignChange { node: usize },
    #[error("tilt function must be non-increasing (fails at level {0})")]
    IncreasingTilt(usize),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<usize>,
    pub level: usize,
    pub first_child: usize,
    pub n_children: usize,
    /// Transition probability from the parent under the reference measure.
    pub prob: f64,
    pub price: f64,
    pub delta: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    grid: TimeGrid,
    nodes: Vec<Node>,
    level_start: Vec<usize>,
    /// External id of every node (the id used in files).
    ids: Vec<usize>,
}

/// Collects nodes in any order; `build` lays them out level by level.
#[derive(Debug, Clone)]
pub struct TreeBuilder {
    grid: TimeGrid,
    raw: Vec<RawNode>,
}

#[derive(Debug, Clone)]
struct RawNode {
    parent: Option<usize>,
    prob: f64,
    price: f64,
    delta: f64,
    r: f64,
}

impl TreeBuilder {
    pub fn new(grid: TimeGrid) -> Self {
        Self { grid, raw: Vec::new() }
    }

    /// Adds the root and returns its builder id.
    pub fn root(&mut self, price: f64, delta: f64, r: f64) -> usize {
        self.raw.push(RawNode { parent: None, prob: 1.0, price, delta, r });
        self.raw.len() - 1
    }

    pub fn child(&mut self, parent: usize, prob: f64, price: f64, delta: f64, r: f64) -> usize {
        self.raw.push(RawNode { parent: Some(parent), prob, price, delta, r });
        self.raw.len() - 1
    }

    pub fn build(self) -> Result<ScenarioTree, TreeError> {
        let n = self.raw.len();
        let mut root = None;
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (id, raw) in self.raw.iter().enumerate() {
            for (field, v) in [("P", raw.price), ("delta", raw.delta), ("r", raw.r), ("p_transition", raw.prob)] {
                if !v.is_finite() {
                    return Err(TreeError::NonFinite { node: id, field });
                }
            }
            match raw.parent {
                None => match root {
                    None => root = Some(id),
                    Some(first) => return Err(TreeError::MultipleRoots(first, id)),
                },
                Some(p) if p >= n => return Err(TreeError::UnknownParent { node: id, parent: p }),
                Some(p) => kids[p].push(id),
            }
        }
        let root = root.ok_or(TreeError::MissingRoot)?;

        // breadth-first layout: children of earlier nodes come first
        let mut order = Vec::with_capacity(n);
        let mut level_of = vec![usize::MAX; n];
        order.push(root);
        level_of[root] = 0;
        let mut head = 0;
        while head < order.len() {
            let id = order[head];
            head += 1;
            for &c in &kids[id] {
                level_of[c] = level_of[id] + 1;
                order.push(c);
            }
        }
        if order.len() != n {
            let node = (0..n).find(|&i| level_of[i] == usize::MAX).unwrap_or(0);
            return Err(TreeError::Unreachable { node });
        }
        let mut index_of = vec![0usize; n];
        for (idx, &id) in order.iter().enumerate() {
            index_of[id] = idx;
        }

        let depth = self.grid.steps();
        let mut nodes = Vec::with_capacity(n);
        for &id in &order {
            let raw = &self.raw[id];
            let level = level_of[id];
            let first_child = kids[id].first().map(|&c| index_of[c]).unwrap_or(0);
            if kids[id].is_empty() && level != depth {
                return Err(TreeError::RaggedLeaves { node: id, level, expected: depth });
            }
            if level > depth {
                return Err(TreeError::GridMismatch { depth: level, points: self.grid.len() });
            }
            nodes.push(Node {
                parent: raw.parent.map(|p| index_of[p]),
                level,
                first_child,
                n_children: kids[id].len(),
                prob: if raw.parent.is_none() { 1.0 } else { raw.prob },
                price: raw.price,
                delta: raw.delta,
                r: raw.r,
            });
        }
        let mut level_start = vec![0usize; depth + 2];
        for l in 0..=depth {
            level_start[l + 1] = level_start[l] + nodes.iter().filter(|nd| nd.level == l).count();
        }
        let tree = ScenarioTree { grid: self.grid, nodes, level_start, ids: order };
        tree.reference_measure().validate(&tree)?;
        Ok(tree)
    }
}

impl ScenarioTree {
    /// Single-scenario tree along `prices` (one value per grid point).
    pub fn path(grid: TimeGrid, prices: &[f64], delta: &[f64], r: &[f64]) -> Result<Self, TreeError> {
        let n = grid.len();
        for len in [prices.len(), delta.len(), r.len()] {
            if len != n {
                return Err(TreeError::LengthMismatch { expected: n, got: len });
            }
        }
        let mut b = TreeBuilder::new(grid);
        let mut prev = b.root(prices[0], delta[0], r[0]);
        for i in 1..n {
            prev = b.child(prev, 1.0, prices[i], delta[i], r[i]);
        }
        b.build()
    }

    /// Scenarios given as separate price paths sharing the initial price.
    /// The root branches into one chain per path with equal probability.
    pub fn fan(grid: TimeGrid, paths: &[Vec<f64>], delta: &[f64], r: &[f64]) -> Result<Self, TreeError> {
        let n = grid.len();
        if paths.is_empty() {
            return Err(TreeError::MissingRoot);
        }
        for p in paths {
            if p.len() != n {
                return Err(TreeError::LengthMismatch { expected: n, got: p.len() });
            }
        }
        for len in [delta.len(), r.len()] {
            if len != n {
                return Err(TreeError::LengthMismatch { expected: n, got: len });
            }
        }
        let p0 = paths[0][0];
        if let Some(bad) = paths.iter().position(|p| p[0] != p0) {
            return Err(TreeError::NonFinite { node: bad, field: "initial price differs across scenarios" });
        }
        let mut b = TreeBuilder::new(grid);
        let root = b.root(p0, delta[0], r[0]);
        let w = 1.0 / paths.len() as f64;
        for p in paths {
            let mut prev = b.child(root, w, p[1], delta[1], r[1]);
            for i in 2..n {
                prev = b.child(prev, 1.0, p[i], delta[i], r[i]);
            }
        }
        b.build()
    }

    /// Non-recombining multiplicative binomial tree with constant liquidity.
    pub fn binomial(
        grid: TimeGrid,
        p0: f64,
        up: f64,
        down: f64,
        p_up: f64,
        delta: f64,
        r: f64,
    ) -> Result<Self, TreeError> {
        let depth = grid.steps();
        let mut b = TreeBuilder::new(grid);
        let root = b.root(p0, delta, r);
        let mut frontier = vec![(root, p0)];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for &(id, p) in &frontier {
                next.push((b.child(id, p_up, p * up, delta, r), p * up));
                next.push((b.child(id, 1.0 - p_up, p * down, delta, r), p * down));
            }
            frontier = next;
        }
        b.build()
    }

    /// Rebuilds the tree with new per-node prices (indexed like `nodes`).
    pub fn with_prices(&self, prices: &[f64]) -> Result<Self, TreeError> {
        self.check_len(prices.len())?;
        let mut t = self.clone();
        for (nd, &p) in t.nodes.iter_mut().zip(prices) {
            nd.price = p;
        }
        Ok(t)
    }

    /// Rebuilds the tree with new per-node depth and resilience.
    pub fn with_liquidity(&self, delta: &[f64], r: &[f64]) -> Result<Self, TreeError> {
        self.check_len(delta.len())?;
        self.check_len(r.len())?;
        let mut t = self.clone();
        for (i, nd) in t.nodes.iter_mut().enumerate() {
            nd.delta = delta[i];
            nd.r = r[i];
        }
        Ok(t)
    }

    /// Rebuilds the tree with new reference transition probabilities.
    pub fn with_reference_measure(&self, measure: &NodeMeasure) -> Result<Self, TreeError> {
        measure.validate(self)?;
        let mut t = self.clone();
        for (nd, &q) in t.nodes.iter_mut().zip(measure.transitions()) {
            nd.prob = q;
        }
        Ok(t)
    }

    pub fn check_len(&self, got: usize) -> Result<(), TreeError> {
        if got != self.len() {
            return Err(TreeError::LengthMismatch { expected: self.len(), got });
        }
        Ok(())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of time steps N; leaves sit at level N.
    pub fn depth(&self) -> usize {
        self.grid.steps()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn level(&self, l: usize) -> Range<usize> {
        self.level_start[l]..self.level_start[l + 1]
    }

    pub fn children(&self, i: usize) -> Range<usize> {
        let nd = &self.nodes[i];
        nd.first_child..nd.first_child + nd.n_children
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].n_children == 0
    }

    pub fn leaves(&self) -> Range<usize> {
        self.level(self.depth())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Position of a leaf node within `leaves()`.
    pub fn leaf_index(&self, node: usize) -> usize {
        node - self.leaves().start
    }

    pub fn internal(&self) -> Range<usize> {
        0..self.leaves().start
    }

    pub fn prices(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.price).collect()
    }

    pub fn leaf_prices(&self) -> Vec<f64> {
        self.leaves().map(|l| self.nodes[l].price).collect()
    }

    /// Node indices from the root down to `node`, inclusive.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.depth() + 1);
        let mut cur = Some(node);
        while let Some(c) = cur {
            p.push(c);
            cur = self.nodes[c].parent;
        }
        p.reverse();
        p
    }

    /// Largest branching factor over internal nodes.
    pub fn max_branching(&self) -> usize {
        self.nodes.iter().map(|n| n.n_children).max().unwrap_or(0)
    }

    /// True when depth and resilience agree across every level.
    pub fn has_deterministic_liquidity(&self) -> bool {
        (0..=self.depth()).all(|l| {
            let r = self.level(l);
            let first = &self.nodes[r.start];
            self.nodes[r].iter().all(|n| n.delta == first.delta && n.r == first.r)
        })
    }

    pub fn reference_measure(&self) -> NodeMeasure {
        NodeMeasure { trans: self.nodes.iter().map(|n| n.prob).collect() }
    }

    /// Largest absolute price over all nodes.
    pub fn sup_abs_price(&self) -> f64 {
        self.nodes.iter().fold(0.0, |m, n| m.max(n.price.abs()))
    }
}

/// A measure on the tree given by transition probabilities; entry `i` is the
/// probability of moving from the parent of `i` to `i` (1 at the root).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMeasure {
    trans: Vec<f64>,
}

impl NodeMeasure {
    pub fn new(tree: &ScenarioTree, trans: Vec<f64>) -> Result<Self, TreeError> {
        let m = Self { trans };
        m.validate(tree)?;
        Ok(m)
    }

    /// Measure with the given leaf probabilities. Subtrees of zero mass get
    /// the reference transitions so conditional quantities stay defined.
    pub fn from_leaf_weights(tree: &ScenarioTree, weights: &[f64]) -> Result<Self, TreeError> {
        if weights.len() != tree.n_leaves() {
            return Err(TreeError::LengthMismatch { expected: tree.n_leaves(), got: weights.len() });
        }
        let mut mass = vec![0.0; tree.len()];
        let leaves = tree.leaves();
        for (k, l) in leaves.clone().enumerate() {
            if !(weights[k] >= 0.0) || !weights[k].is_finite() {
                return Err(TreeError::BadProbability { node: l, value: weights[k] });
            }
            mass[l] = weights[k];
        }
        for i in tree.internal().rev() {
            mass[i] = tree.children(i).map(|c| mass[c]).sum();
        }
        let mut trans = vec![1.0; tree.len()];
        for i in tree.internal() {
            let kids = tree.children(i);
            if mass[i] > 0.0 {
                for c in kids {
                    trans[c] = mass[c] / mass[i];
                }
            } else {
                for c in kids {
                    trans[c] = tree.node(c).prob;
                }
            }
        }
        Self::new(tree, trans)
    }

    pub fn transitions(&self) -> &[f64] {
        &self.trans
    }

    pub fn transition(&self, i: usize) -> f64 {
        self.trans[i]
    }

    pub fn validate(&self, tree: &ScenarioTree) -> Result<(), TreeError> {
        tree.check_len(self.trans.len())?;
        for (i, &q) in self.trans.iter().enumerate() {
            if !(0.0..=1.0).contains(&q) {
                return Err(TreeError::BadProbability { node: i, value: q });
            }
        }
        for i in tree.internal() {
            let sum: f64 = tree.children(i).map(|c| self.trans[c]).sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(TreeError::NotSimplex { node: i, sum });
            }
        }
        Ok(())
    }

    /// Unconditional probability of reaching every node.
    pub fn node_probabilities(&self, tree: &ScenarioTree) -> Vec<f64> {
        let mut p = vec![0.0; tree.len()];
        p[0] = 1.0;
        for i in 1..tree.len() {
            let parent = tree.parent(i).expect("non-root node has a parent");
            p[i] = p[parent] * self.trans[i];
        }
        p
    }

    pub fn leaf_probabilities(&self, tree: &ScenarioTree) -> Vec<f64> {
        let p = self.node_probabilities(tree);
        p[tree.leaves()].to_vec()
    }
}

/// Backward recursion of leaf values under `q`; returns a value per node.
pub fn conditional_expectation(
    tree: &ScenarioTree,
    q: &NodeMeasure,
    leaf_values: &[f64],
) -> Result<Vec<f64>, TreeError> {
    q.validate(tree)?;
    if leaf_values.len() != tree.n_leaves() {
        return Err(TreeError::LengthMismatch { expected: tree.n_leaves(), got: leaf_values.len() });
    }
    let mut v = vec![0.0; tree.len()];
    v[tree.leaves()].copy_from_slice(leaf_values);
    for i in tree.internal().rev() {
        v[i] = tree.children(i).map(|c| q.trans[c] * v[c]).sum();
    }
    Ok(v)
}

/// The `q`-martingale closing at `terminal` (one value per leaf).
pub fn martingale_projection(
    tree: &ScenarioTree,
    q: &NodeMeasure,
    terminal: &[f64],
) -> Result<Vec<f64>, TreeError> {
    conditional_expectation(tree, q, terminal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub is_martingale: bool,
    pub max_defect: f64,
    pub worst_node: Option<usize>,
}

/// Checks `m[i] = sum_c q_c m[c]` at every internal node, relative to the
/// magnitude of the process.
pub fn is_martingale(tree: &ScenarioTree, q: &NodeMeasure, m: &[f64]) -> MartingaleCheck {
    if m.len() != tree.len() || q.trans.len() != tree.len() {
        return MartingaleCheck { is_martingale: false, max_defect: f64::INFINITY, worst_node: None };
    }
    let scale = 1.0 + m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst = (0.0, None);
    for i in tree.internal() {
        let e: f64 = tree.children(i).map(|c| q.trans[c] * m[c]).sum();
        let d = (m[i] - e).abs();
        if !(d <= worst.0) {
            worst = (d, Some(i));
        }
    }
    MartingaleCheck { is_martingale: worst.0 <= 1e-10 * scale, max_defect: worst.0, worst_node: worst.1 }
}

/// `Q(P_T > threshold)`.
pub fn q_tail_probability(tree: &ScenarioTree, q: &NodeMeasure, threshold: f64) -> f64 {
    let p = q.node_probabilities(tree);
    tree.leaves().filter(|&l| tree.node(l).price > threshold).map(|l| p[l]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltResult {
    pub measure: NodeMeasure,
    pub martingale: Vec<f64>,
    /// `sup |P + g - M|` over all nodes.
    pub closeness: f64,
    /// `Q(P_T > eps)`.
    pub tail_probability: f64,
}

/// Makes `P + g` a martingale by mixing, at every internal node, the child
/// with the most negative and the child with the most positive increment.
///
/// `g` holds one value per grid point and must be non-increasing.
pub fn tilt_to_martingale(tree: &ScenarioTree, g: &[f64], eps: f64) -> Result<TiltResult, TreeError> {
    let n_levels = tree.depth() + 1;
    if g.len() != n_levels {
        return Err(TreeError::LengthMismatch { expected: n_levels, got: g.len() });
    }
    if let Some(l) = (1..n_levels).find(|&l| g[l] > g[l - 1]) {
        return Err(TreeError::IncreasingTilt(l));
    }
    let shifted = |i: usize| tree.node(i).price + g[tree.node(i).level];
    let mut trans = vec![0.0; tree.len()];
    trans[0] = 1.0;
    for i in tree.internal() {
        let base = shifted(i);
        let kids = tree.children(i);
        // lowest index wins ties
        let mut lo = (f64::INFINITY, kids.start);
        let mut hi = (f64::NEG_INFINITY, kids.start);
        let mut flat = None;
        for c in kids.clone() {
            let d = shifted(c) - base;
            if d < lo.0 {
                lo = (d, c);
            }
            if d > hi.0 {
                hi = (d, c);
            }
            if d == 0.0 && flat.is_none() {
                flat = Some(c);
            }
        }
        if let Some(c) = flat {
            trans[c] = 1.0;
        } else if lo.0 < 0.0 && hi.0 > 0.0 {
            let span = hi.0 - lo.0;
            trans[lo.1] = hi.0 / span;
            trans[hi.1] = -lo.0 / span;
        } else {
            return Err(TreeError::NoSignChange { node: i });
        }
    }
    let measure = NodeMeasure::new(tree, trans)?;
    let terminal: Vec<f64> = tree.leaves().map(shifted).collect();
    let martingale = martingale_projection(tree, &measure, &terminal)?;
    let closeness = (0..tree.len()).fold(0.0f64, |m, i| m.max((shifted(i) - martingale[i]).abs()));
    let tail_probability = q_tail_probability(tree, &measure, eps);
    Ok(TiltResult { measure, martingale, closeness, tail_probability })
}

/// Where to place the root value inside its admissible interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootChoice {
    Lowest,
    Highest,
    Closest(f64),
}

/// Outcome of the band recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BandSelection {
    Feasible { martingale: Vec<f64> },
    /// The first node (in backward order) whose admissible interval is empty.
    Infeasible { node: usize, lower: f64, upper: f64 },
}

/// Finds a `q`-martingale `M` with `lower <= M <= upper` node-wise.
///
/// Backward pass: the admissible set at a node is its own interval
/// intersected with the range of `q`-expectations of admissible child
/// values. Forward pass: the root value is placed per `root`, and each
/// node's value is split onto its children by a common interpolation
/// weight between their interval ends, which reproduces the parent exactly.
pub fn martingale_in_band(
    tree: &ScenarioTree,
    q: &NodeMeasure,
    lower: &[f64],
    upper: &[f64],
    root: RootChoice,
) -> Result<BandSelection, TreeError> {
    q.validate(tree)?;
    tree.check_len(lower.len())?;
    tree.check_len(upper.len())?;
    let mut lo = lower.to_vec();
    let mut hi = upper.to_vec();
    for i in (0..tree.len()).rev() {
        if !tree.is_leaf(i) {
            let (mut elo, mut ehi) = (0.0, 0.0);
            for c in tree.children(i) {
                elo += q.trans[c] * lo[c];
                ehi += q.trans[c] * hi[c];
            }
            lo[i] = lo[i].max(elo);
            hi[i] = hi[i].min(ehi);
        }
        if lo[i] > hi[i] {
            // absorb rounding from the interpolated sums
            let slack = 1e-13 * (1.0 + lo[i].abs().max(hi[i].abs()));
            if lo[i] - hi[i] <= slack {
                let mid = 0.5 * (lo[i] + hi[i]);
                lo[i] = mid;
                hi[i] = mid;
            } else {
                return Ok(BandSelection::Infeasible { node: i, lower: lo[i], upper: hi[i] });
            }
        }
    }
    let mut m = vec![0.0; tree.len()];
    m[0] = match root {
        RootChoice::Lowest => lo[0],
        RootChoice::Highest => hi[0],
        RootChoice::Closest(x) => x.clamp(lo[0], hi[0]),
    };
    for i in tree.internal() {
        let kids = tree.children(i);
        let elo: f64 = kids.clone().map(|c| q.trans[c] * lo[c]).sum();
        let width: f64 = kids.clone().map(|c| q.trans[c] * (hi[c] - lo[c])).sum();
        let theta = if width > 0.0 { ((m[i] - elo) / width).clamp(0.0, 1.0) } else { 0.5 };
        for c in kids {
            m[c] = lo[c] + theta * (hi[c] - lo[c]);
        }
    }
    Ok(BandSelection::Feasible { martingale: m })
}
