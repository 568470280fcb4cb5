//! Regression trees: flat node storage and a presorted greedy grower.
//!
//! Rows are kept in one index array per feature, each sorted by that
//! feature. A node owns the same contiguous segment `[lo, hi)` in every
//! array; splitting stably partitions each segment, so sorting happens once
//! per fit rather than once per node.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Weighted training rows reaching the node.
        cover: f64,
        /// Weighted mean response at the node.
        value: f64,
        gain: f64,
    },
    Leaf { value: f64, cover: f64 },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match *self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => cover,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            TreeNode::Split { value, .. } | TreeNode::Leaf { value, .. } => value,
        }
    }
}

/// A fitted tree; the root is `nodes[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { value, cover }],
        }
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        while let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = self.nodes[i]
        {
            i = if row[feature] <= threshold { left } else { right };
        }
        i
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.nodes[self.leaf_index(row)].value()
    }

    /// Number of split levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .max()
    }

    /// Add each split's gain to `out[feature]`.
    pub fn accumulate_gain(&self, out: &mut [f64]) {
        for n in &self.nodes {
            if let TreeNode::Split { feature, gain, .. } = n {
                out[*feature] += gain;
            }
        }
    }

    /// Multiply every node value by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for n in &mut self.nodes {
            match n {
                TreeNode::Split { value, .. } | TreeNode::Leaf { value, .. } => *value *= factor,
            }
        }
    }
}

/// Column-major copy of a design matrix.
#[derive(Debug, Clone)]
pub struct Columns {
    pub cols: Vec<Vec<f64>>,
    pub n_rows: usize,
}

impl Columns {
    pub fn from_view(x: ArrayView2<'_, f64>) -> Self {
        Self {
            cols: x.columns().into_iter().map(|c| c.to_vec()).collect(),
            n_rows: x.nrows(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }

    /// Row indices sorted by each feature (stable, so ties keep row order).
    pub fn presort(&self) -> Vec<Vec<u32>> {
        self.cols
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..self.n_rows as u32).collect();
                idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
                idx
            })
            .collect()
    }
}

/// How split thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Exhaustive search over midpoints between consecutive distinct values.
    Best,
    /// One uniform random threshold per candidate feature.
    Random,
}

/// How nodes are expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthPolicy {
    DepthFirst,
    /// Always expand the frontier leaf with the largest gain.
    BestFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub max_leaves: Option<usize>,
    pub min_leaf: usize,
    /// Features examined per split; `None` means all.
    pub mtry: Option<usize>,
    pub threshold: ThresholdRule,
    pub growth: GrowthPolicy,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            max_leaves: None,
            min_leaf: 1,
            mtry: None,
            threshold: ThresholdRule::Best,
            growth: GrowthPolicy::DepthFirst,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    node: usize,
    lo: usize,
    hi: usize,
    depth: usize,
    sum_w: f64,
    sum_wy: f64,
    split: Option<Candidate>,
}

struct ByGain(Pending);

impl PartialEq for ByGain {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for ByGain {}
impl PartialOrd for ByGain {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ByGain {
    fn cmp(&self, other: &Self) -> Ordering {
        let g = |p: &Pending| p.split.map_or(f64::NEG_INFINITY, |c| c.gain);
        // higher gain first; among equal gains the older node first
        g(&self.0)
            .total_cmp(&g(&other.0))
            .then_with(|| other.0.node.cmp(&self.0.node))
    }
}

/// Greedy least-squares tree grower over presorted rows.
pub struct Grower<'a> {
    x: &'a Columns,
    y: &'a [f64],
    w: &'a [f64],
    params: &'a TreeParams,
    order: Vec<Vec<u32>>,
    left_mark: Vec<bool>,
    scratch: Vec<u32>,
}

impl<'a> Grower<'a> {
    /// `sorted` holds every row sorted per feature; rows with zero weight are
    /// dropped here.
    pub fn new(
        x: &'a Columns,
        y: &'a [f64],
        w: &'a [f64],
        sorted: &[Vec<u32>],
        params: &'a TreeParams,
    ) -> Self {
        let order = sorted
            .iter()
            .map(|o| o.iter().copied().filter(|&r| w[r as usize] > 0.0).collect())
            .collect();
        Self {
            x,
            y,
            w,
            params,
            order,
            left_mark: vec![false; x.n_rows],
            scratch: Vec::new(),
        }
    }

    pub fn grow(mut self, rng: &mut ChaCha8Rng) -> Tree {
        let n_active = self.order.first().map_or(0, Vec::len);
        let (mut sw, mut swy) = (0.0, 0.0);
        if let Some(o) = self.order.first() {
            for &r in o {
                let r = r as usize;
                sw += self.w[r];
                swy += self.w[r] * self.y[r];
            }
        }
        let mut tree = Tree::leaf(if sw > 0.0 { swy / sw } else { 0.0 }, sw);
        if n_active == 0 {
            return tree;
        }
        let root = Pending {
            node: 0,
            lo: 0,
            hi: n_active,
            depth: 0,
            sum_w: sw,
            sum_wy: swy,
            split: None,
        };
        match self.params.growth {
            GrowthPolicy::DepthFirst => {
                let mut stack = vec![root];
                while let Some(mut p) = stack.pop() {
                    p.split = self.best_split(&p, rng);
                    if let Some((l, r)) = self.apply(&mut tree, &p) {
                        // push right first so the left subtree is built first
                        stack.push(r);
                        stack.push(l);
                    }
                }
            }
            GrowthPolicy::BestFirst => {
                let max_leaves = self.params.max_leaves.unwrap_or(usize::MAX).max(1);
                let mut heap = BinaryHeap::new();
                let mut first = root;
                first.split = self.best_split(&first, rng);
                heap.push(ByGain(first));
                let mut leaves = 1;
                while leaves < max_leaves {
                    let Some(ByGain(p)) = heap.pop() else { break };
                    let Some((mut l, mut r)) = self.apply(&mut tree, &p) else {
                        break;
                    };
                    leaves += 1;
                    l.split = self.best_split(&l, rng);
                    r.split = self.best_split(&r, rng);
                    heap.push(ByGain(l));
                    heap.push(ByGain(r));
                }
            }
        }
        tree
    }

    fn best_split(&self, p: &Pending, rng: &mut ChaCha8Rng) -> Option<Candidate> {
        if let Some(d) = self.params.max_depth {
            if p.depth >= d {
                return None;
            }
        }
        let min_leaf = self.params.min_leaf.max(1) as f64;
        if p.sum_w < 2.0 * min_leaf || p.hi - p.lo < 2 {
            return None;
        }
        let p_feat = self.x.n_features();
        let features: Vec<usize> = match self.params.mtry {
            Some(m) if m < p_feat => {
                let mut f = sample(rng, p_feat, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p_feat).collect(),
        };
        // sums of y about the node mean keep the gain free of cancellation
        let mu = p.sum_wy / p.sum_w;
        let (mut tot, mut ss) = (0.0, 0.0);
        for &r in &self.order[0][p.lo..p.hi] {
            let r = r as usize;
            let d = self.y[r] - mu;
            tot += self.w[r] * d;
            ss += self.w[r] * d * d;
        }
        let node = Centered { mu, tot, parent: tot * tot / p.sum_w };
        let floor = 1e-12 * (ss - node.parent).abs().max(1e-300);
        let mut best: Option<Candidate> = None;
        for f in features {
            let seg = &self.order[f][p.lo..p.hi];
            let col = &self.x.cols[f];
            let cand = match self.params.threshold {
                ThresholdRule::Best => best_threshold(seg, col, self.y, self.w, p, min_leaf, &node),
                ThresholdRule::Random => {
                    random_threshold(seg, col, self.y, self.w, p, min_leaf, &node, rng)
                }
            };
            if let Some((gain, threshold)) = cand {
                // features yielding the same partition tie up to rounding; the
                // lower index keeps the split independent of the outcome's offset
                if gain > floor && best.is_none_or(|b| gain > b.gain + 1e-10 * b.gain.abs()) {
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }

    /// Turn the pending leaf into a split and return the two children.
    fn apply(&mut self, tree: &mut Tree, p: &Pending) -> Option<(Pending, Pending)> {
        let c = p.split?;
        let col = &self.x.cols[c.feature];
        let (mut lw, mut lwy, mut n_left) = (0.0, 0.0, 0);
        for &r in &self.order[c.feature][p.lo..p.hi] {
            let r = r as usize;
            let left = col[r] <= c.threshold;
            self.left_mark[r] = left;
            if left {
                n_left += 1;
                lw += self.w[r];
                lwy += self.w[r] * self.y[r];
            }
        }
        for o in &mut self.order {
            stable_partition(&mut o[p.lo..p.hi], &self.left_mark, &mut self.scratch);
        }
        let (rw, rwy) = (p.sum_w - lw, p.sum_wy - lwy);
        let li = tree.nodes.len();
        tree.nodes.push(TreeNode::Leaf {
            value: lwy / lw,
            cover: lw,
        });
        tree.nodes.push(TreeNode::Leaf {
            value: rwy / rw,
            cover: rw,
        });
        tree.nodes[p.node] = TreeNode::Split {
            feature: c.feature,
            threshold: c.threshold,
            left: li,
            right: li + 1,
            cover: p.sum_w,
            value: p.sum_wy / p.sum_w,
            gain: c.gain,
        };
        let mid = p.lo + n_left;
        let child = |node, lo, hi, sum_w, sum_wy| Pending {
            node,
            lo,
            hi,
            depth: p.depth + 1,
            sum_w,
            sum_wy,
            split: None,
        };
        Some((child(li, p.lo, mid, lw, lwy), child(li + 1, mid, p.hi, rw, rwy)))
    }
}

/// Node mean, weighted sum of `y - mu`, and that sum's squared share.
struct Centered {
    mu: f64,
    tot: f64,
    parent: f64,
}

impl Centered {
    fn gain(&self, lw: f64, ld: f64, rw: f64) -> f64 {
        let rd = self.tot - ld;
        ld * ld / lw + rd * rd / rw - self.parent
    }
}

fn stable_partition(seg: &mut [u32], left: &[bool], scratch: &mut Vec<u32>) {
    scratch.clear();
    let mut k = 0;
    for i in 0..seg.len() {
        let r = seg[i];
        if left[r as usize] {
            seg[k] = r;
            k += 1;
        } else {
            scratch.push(r);
        }
    }
    seg[k..].copy_from_slice(scratch);
}

fn best_threshold(
    seg: &[u32],
    col: &[f64],
    y: &[f64],
    w: &[f64],
    p: &Pending,
    min_leaf: f64,
    node: &Centered,
) -> Option<(f64, f64)> {
    let (mut lw, mut ld) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for i in 0..seg.len() - 1 {
        let r = seg[i] as usize;
        lw += w[r];
        ld += w[r] * (y[r] - node.mu);
        let (a, b) = (col[r], col[seg[i + 1] as usize]);
        if a >= b || lw < min_leaf {
            continue;
        }
        let rw = p.sum_w - lw;
        if rw < min_leaf {
            break;
        }
        let gain = node.gain(lw, ld, rw);
        if best.is_none_or(|(g, _)| gain > g + 1e-10 * g.abs()) {
            let mut t = a + 0.5 * (b - a);
            if t >= b {
                t = a;
            }
            best = Some((gain, t));
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn random_threshold(
    seg: &[u32],
    col: &[f64],
    y: &[f64],
    w: &[f64],
    p: &Pending,
    min_leaf: f64,
    node: &Centered,
    rng: &mut ChaCha8Rng,
) -> Option<(f64, f64)> {
    let lo = col[seg[0] as usize];
    let hi = col[seg[seg.len() - 1] as usize];
    if !(lo < hi) {
        return None;
    }
    let mut t = rng.random_range(lo..hi);
    if t >= hi {
        t = lo;
    }
    let (mut lw, mut ld) = (0.0, 0.0);
    for &r in seg {
        let r = r as usize;
        if col[r] > t {
            break;
        }
        lw += w[r];
        ld += w[r] * (y[r] - node.mu);
    }
    let rw = p.sum_w - lw;
    if lw < min_leaf || rw < min_leaf {
        return None;
    }
    Some((node.gain(lw, ld, rw), t))
}

/// Feature selection rule for a single CART fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    All,
    /// Fraction of features drawn afresh at each split (at least one).
    Fraction(f64),
}

impl FeatureSubset {
    pub fn mtry(self, p: usize) -> Option<usize> {
        match self {
            FeatureSubset::All => None,
            FeatureSubset::Fraction(f) if f >= 1.0 => None,
            FeatureSubset::Fraction(f) => Some(((f * p as f64).round() as usize).clamp(1, p)),
        }
    }
}

/// Fit one greedy variance-reduction tree on all rows with unit weights.
pub fn fit_cart(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    max_depth: Option<usize>,
    min_leaf: usize,
    features: FeatureSubset,
    seed: u64,
) -> Result<Tree> {
    if x.nrows() == 0 || y.is_empty() {
        return Err(invalid!("cannot fit a tree on empty input"));
    }
    if x.nrows() != y.len() {
        return Err(invalid!("{} rows in X but {} responses", x.nrows(), y.len()));
    }
    if x.ncols() == 0 {
        return Err(invalid!("design matrix has no columns"));
    }
    if min_leaf == 0 {
        return Err(invalid!("min_leaf must be at least 1"));
    }
    let cols = Columns::from_view(x);
    let sorted = cols.presort();
    let w = vec![1.0; y.len()];
    let params = TreeParams {
        max_depth,
        min_leaf,
        mtry: features.mtry(cols.n_features()),
        ..TreeParams::default()
    };
    let mut rng = crate::rng::rng(seed);
    Ok(Grower::new(&cols, y, &w, &sorted, &params).grow(&mut rng))
}
