//! Honest causal forest for a continuous treatment.
//!
//! Outcome and treatment are first residualized with the cross-fitting
//! machinery from [`crate::dml`]. Each tree then splits on one half of its
//! subsample (J) and fills leaf statistics from the other half (I). A query's
//! CATE is the forest-weighted least-squares slope of outcome residuals on
//! treatment residuals, where row `i` weighs `1/|leaf|` in every tree whose
//! estimation leaf it shares with the query, averaged over trees.
//!
//! Trees come in bags of two drawn from a shared half-sample, which yields
//! the little-bags variance estimate.

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dml::{crossfit_residuals, make_folds, DmlEstimate, FoldPlan, ResidualSet};
use crate::error::{degenerate, invalid, Error, Result};
use crate::learners::{LearnerKind, LearnerSpec, Tree, TreeNode};
use crate::rng;
use crate::stats;

pub const FOREST_FORMAT_VERSION: u32 = 1;
/// Trees per little bag.
pub const BAG_SIZE: usize = 2;
const MAX_RETRIES: usize = 5;
/// Fewest defined CATEs for a forest ATE.
pub const MIN_VALID_CATES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Rows per tree as a fraction of all rows, capped at the bag's half-sample.
    pub subsample: f64,
    /// Share of a tree's rows used for splitting.
    pub honest_fraction: f64,
    /// Minimum split-half and estimation-half rows in every child.
    pub min_leaf: usize,
    /// Features tried per split; `ceil(sqrt(p))` when absent.
    pub mtry: Option<usize>,
    /// Family-wise level of the slope-difference test a split must pass;
    /// 1 disables the test.
    pub split_alpha: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 2000,
            subsample: 0.5,
            honest_fraction: 0.5,
            min_leaf: 5,
            mtry: None,
            split_alpha: 0.05,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn new(n_trees: usize, seed: u64) -> Self {
        Self {
            n_trees,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees < BAG_SIZE || !self.n_trees.is_multiple_of(BAG_SIZE) {
            return Err(invalid!("n_trees must be a positive multiple of {BAG_SIZE}, got {}", self.n_trees));
        }
        for (name, v) in [("subsample", self.subsample), ("honest_fraction", self.honest_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.min_leaf == 0 {
            return Err(invalid!("min_leaf must be positive"));
        }
        if self.mtry == Some(0) {
            return Err(invalid!("mtry must be positive"));
        }
        if !(self.split_alpha > 0.0 && self.split_alpha <= 1.0) {
            return Err(invalid!("split_alpha must lie in (0, 1], got {}", self.split_alpha));
        }
        Ok(())
    }

    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }
}

/// Raw sums over a set of rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub n: f64,
    pub sum_t: f64,
    pub sum_y: f64,
    pub sum_tt: f64,
    pub sum_ty: f64,
}

impl LeafStats {
    fn add(&mut self, t: f64, y: f64) {
        self.n += 1.0;
        self.sum_t += t;
        self.sum_y += y;
        self.sum_tt += t * t;
        self.sum_ty += t * y;
    }

    /// Within-leaf slope with intercept; `None` when t is constant.
    pub fn slope(&self) -> Option<f64> {
        let sxx = self.sum_tt - self.sum_t * self.sum_t / self.n;
        (sxx > 0.0).then(|| (self.sum_ty - self.sum_t * self.sum_y / self.n) / sxx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestTree {
    /// Splits carry the J-half slope as `value` and J count as `cover`;
    /// leaves carry the I-half slope and I count.
    pub tree: Tree,
    /// Sorted row ids used for splitting (J).
    pub split_rows: Vec<u32>,
    /// Sorted row ids used for leaf statistics (I).
    pub estimate_rows: Vec<u32>,
    /// Leaf node of each estimation row.
    pub estimate_leaves: Vec<u32>,
    /// Indexed by node; zero at internal nodes.
    pub leaf_stats: Vec<LeafStats>,
}

impl HonestTree {
    /// Recompute leaf statistics from the estimation rows alone.
    pub fn fill_leaf_stats(&mut self, x: ArrayView2<'_, f64>, y: &[f64], t: &[f64]) {
        self.leaf_stats = vec![LeafStats::default(); self.tree.nodes.len()];
        self.estimate_leaves.clear();
        let mut row = vec![0.0; x.ncols()];
        for &i in &self.estimate_rows {
            let i = i as usize;
            row.iter_mut().zip(x.row(i)).for_each(|(d, s)| *d = *s);
            let leaf = self.tree.leaf_index(&row);
            self.leaf_stats[leaf].add(t[i], y[i]);
            self.estimate_leaves.push(leaf as u32);
        }
        for (node, s) in self.tree.nodes.iter_mut().zip(&self.leaf_stats) {
            if let TreeNode::Leaf { value, cover } = node {
                *value = s.slope().unwrap_or(0.0);
                *cover = s.n;
            }
        }
    }

    pub fn leaf_stats_at(&self, row: &[f64]) -> &LeafStats {
        &self.leaf_stats[self.tree.leaf_index(row)]
    }
}

/// Moments of a row set, enough for centered slopes and residual variance.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    st: f64,
    sy: f64,
    stt: f64,
    sty: f64,
    syy: f64,
}

impl Moments {
    fn add(&mut self, t: f64, y: f64) {
        self.n += 1.0;
        self.st += t;
        self.sy += y;
        self.stt += t * t;
        self.sty += t * y;
        self.syy += y * y;
    }

    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            n: self.n - o.n,
            st: self.st - o.st,
            sy: self.sy - o.sy,
            stt: self.stt - o.stt,
            sty: self.sty - o.sty,
            syy: self.syy - o.syy,
        }
    }

    fn sxx(&self) -> f64 {
        self.stt - self.st * self.st / self.n
    }

    fn sxy(&self) -> f64 {
        self.sty - self.st * self.sy / self.n
    }

    fn slope(&self) -> f64 {
        self.sxy() / self.sxx()
    }

}

struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
    left: Moments,
    right: Moments,
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    t: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn moments(&self, rows: &[u32]) -> Moments {
        let mut m = Moments::default();
        for &i in rows {
            m.add(self.t[i as usize], self.y[i as usize]);
        }
        m
    }

    fn best_split(&self, j_rows: &[u32], i_rows: &[u32], rng: &mut ChaCha8Rng) -> Option<Candidate> {
        let min_leaf = self.params.min_leaf;
        if j_rows.len() < 2 * min_leaf || i_rows.len() < 2 * min_leaf {
            return None;
        }
        let total = self.moments(j_rows);
        let i_total = self.moments(i_rows);
        let tol_j = 1e-10 * total.sxx().max(f64::MIN_POSITIVE);
        let tol_i = 1e-10 * i_total.sxx().max(f64::MIN_POSITIVE);
        let mut features = sample(rng, self.x.ncols(), self.mtry).into_vec();
        features.sort_unstable();

        let mut best: Option<Candidate> = None;
        let mut n_candidates = 0usize;
        let mut js = j_rows.to_vec();
        let mut is = i_rows.to_vec();
        for &f in &features {
            let col = self.x.column(f);
            let key = |a: &u32, b: &u32| col[*a as usize].total_cmp(&col[*b as usize]).then(a.cmp(b));
            js.sort_by(key);
            is.sort_by(key);
            let mut left = Moments::default();
            let mut i_left = Moments::default();
            let mut ip = 0;
            for k in 1..js.len() {
                let prev = js[k - 1] as usize;
                left.add(self.t[prev], self.y[prev]);
                let (a, b) = (col[prev], col[js[k] as usize]);
                if a == b || k < min_leaf || js.len() - k < min_leaf {
                    continue;
                }
                let mut threshold = a + (b - a) / 2.0;
                if threshold >= b {
                    threshold = a;
                }
                while ip < is.len() && col[is[ip] as usize] <= threshold {
                    let r = is[ip] as usize;
                    i_left.add(self.t[r], self.y[r]);
                    ip += 1;
                }
                if ip < min_leaf || is.len() - ip < min_leaf {
                    continue;
                }
                let right = total.minus(&left);
                let i_right = i_total.minus(&i_left);
                if left.sxx() <= tol_j || right.sxx() <= tol_j || i_left.sxx() <= tol_i || i_right.sxx() <= tol_i {
                    continue;
                }
                n_candidates += 1;
                let d = left.slope() - right.slope();
                let score = left.n * right.n / (left.n + right.n) * d * d;
                if best.as_ref().is_none_or(|c| score > c.score) {
                    best = Some(Candidate {
                        feature: f,
                        threshold,
                        score,
                        left,
                        right,
                    });
                }
            }
        }
        let best = best?;
        if self.params.split_alpha < 1.0 {
            let df = best.left.n.min(best.right.n) - 2.0;
            let z = stats::t_quantile(1.0 - self.params.split_alpha / (2.0 * n_candidates as f64), df);
            let d = best.left.slope() - best.right.slope();
            let v = self.robust_slope_var(j_rows, &best);
            if v > 0.0 && d * d / v < z * z {
                return None;
            }
            if v == 0.0 && d == 0.0 {
                return None;
            }
        }
        Some(best)
    }

    /// HC1 variance of the difference between the two child slopes.
    fn robust_slope_var(&self, j_rows: &[u32], c: &Candidate) -> f64 {
        let col = self.x.column(c.feature);
        let side = |m: &Moments| (m.st / m.n, m.sy / m.n, m.slope(), m.sxx(), m.n);
        let sides = [side(&c.left), side(&c.right)];
        let mut meat = [0.0; 2];
        for &r in j_rows {
            let r = r as usize;
            let s = usize::from(col[r] > c.threshold);
            let (tm, ym, b, _, _) = sides[s];
            let dt = self.t[r] - tm;
            let e = self.y[r] - ym - b * dt;
            meat[s] += dt * dt * e * e;
        }
        sides
            .iter()
            .zip(meat)
            .map(|(&(_, _, _, sxx, n), m)| m / (sxx * sxx) * n / (n - 2.0).max(1.0))
            .sum()
    }

    fn build(&mut self, j_rows: Vec<u32>, i_rows: Vec<u32>, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            value: 0.0,
            cover: i_rows.len() as f64,
        });
        if let Some(c) = self.best_split(&j_rows, &i_rows, rng) {
            let col = self.x.column(c.feature);
            let goes_left = |r: &u32| col[*r as usize] <= c.threshold;
            let (jl, jr): (Vec<u32>, Vec<u32>) = j_rows.iter().partition(|r| goes_left(r));
            let (il, ir): (Vec<u32>, Vec<u32>) = i_rows.iter().partition(|r| goes_left(r));
            let node_value = self.moments(&j_rows).slope();
            let left = self.build(jl, il, rng);
            let right = self.build(jr, ir, rng);
            self.nodes[id] = TreeNode::Split {
                feature: c.feature,
                threshold: c.threshold,
                left,
                right,
                cover: j_rows.len() as f64,
                value: node_value,
                gain: c.score,
            };
        }
        id
    }
}

/// Grow one honest tree on `rows`: shuffle, split into J and I halves, grow
/// on J, then fill leaf statistics from I. `None` when either half has no
/// treatment variation.
pub fn grow_tree(
    x: ArrayView2<'_, f64>,
    y_resid: &[f64],
    t_resid: &[f64],
    rows: &[u32],
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Result<Option<HonestTree>> {
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(rng);
    let n_split = (params.honest_fraction * rows.len() as f64).floor() as usize;
    let (j, i) = shuffled.split_at(n_split);
    if j.len() < params.min_leaf || i.len() < params.min_leaf {
        return Err(invalid!(
            "tree sample of {} rows cannot hold min_leaf {} in both halves",
            rows.len(),
            params.min_leaf
        ));
    }
    let (mut j, mut i) = (j.to_vec(), i.to_vec());
    j.sort_unstable();
    i.sort_unstable();
    let varies = |rs: &[u32]| {
        let v: Vec<f64> = rs.iter().map(|&r| t_resid[r as usize]).collect();
        stats::sample_var(&v) > 0.0
    };
    if !varies(&j) || !varies(&i) {
        return Ok(None);
    }
    let mut g = Grower {
        x,
        y: y_resid,
        t: t_resid,
        params,
        mtry: params.mtry_for(x.ncols()),
        nodes: Vec::new(),
    };
    g.build(j.clone(), i.clone(), rng);
    let mut tree = HonestTree {
        tree: Tree { nodes: g.nodes },
        split_rows: j,
        estimate_rows: i,
        estimate_leaves: Vec::new(),
        leaf_stats: Vec::new(),
    };
    tree.fill_leaf_stats(x, y_resid, t_resid);
    Ok(Some(tree))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForestModel {
    pub format_version: u32,
    pub params: ForestParams,
    pub n: usize,
    pub n_features: usize,
    pub y_resid: Vec<f64>,
    pub t_resid: Vec<f64>,
    /// Tree `b` belongs to bag `b / BAG_SIZE`.
    pub trees: Vec<HonestTree>,
    /// Sorted half-sample of each bag.
    pub bags: Vec<Vec<u32>>,
}

/// Cross-fitted centering; same contract as [`crossfit_residuals`].
pub fn center(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    t: &[f64],
    spec: &LearnerSpec,
    plan: &FoldPlan,
) -> Result<ResidualSet> {
    crossfit_residuals(spec, x, y, t, plan)
}

pub fn default_centering_spec(seed: u64) -> LearnerSpec {
    LearnerSpec::new(LearnerKind::BaggedTrees, seed)
}

fn grow_bag(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    t: &[f64],
    params: &ForestParams,
    bag: usize,
) -> Result<(Vec<u32>, Vec<HonestTree>)> {
    let n = y.len();
    let mut r = rng::stream(params.seed, bag as u64);
    let half = n / 2;
    let per_tree = ((params.subsample * n as f64).round() as usize).clamp(1, half);
    for attempt in 0..=MAX_RETRIES {
        let mut half_sample: Vec<u32> = sample(&mut r, n, half).into_iter().map(|i| i as u32).collect();
        half_sample.sort_unstable();
        let mut trees = Vec::with_capacity(BAG_SIZE);
        for _ in 0..BAG_SIZE {
            let mut rows: Vec<u32> = sample(&mut r, half, per_tree).into_iter().map(|k| half_sample[k]).collect();
            rows.sort_unstable();
            match grow_tree(x, y, t, &rows, params, &mut r)? {
                Some(tree) => trees.push(tree),
                None => break,
            }
        }
        if trees.len() == BAG_SIZE {
            return Ok((half_sample, trees));
        }
        log::warn!("bag {bag}: treatment residuals constant in a tree sample, redrawing (attempt {})", attempt + 1);
    }
    Err(degenerate!(
        "bag {bag}: treatment residuals constant after {MAX_RETRIES} redraws"
    ))
}

/// Grow the forest on pre-centered residuals.
pub fn fit_forest(x: ArrayView2<'_, f64>, y_resid: Vec<f64>, t_resid: Vec<f64>, params: &ForestParams) -> Result<CausalForestModel> {
    params.validate()?;
    let n = x.nrows();
    if y_resid.len() != n || t_resid.len() != n {
        return Err(invalid!(
            "row counts differ: X {n}, residuals {} and {}",
            y_resid.len(),
            t_resid.len()
        ));
    }
    if x.iter().chain(&y_resid).chain(&t_resid).any(|v| !v.is_finite()) {
        return Err(invalid!("forest inputs contain non-finite values"));
    }
    if x.ncols() == 0 {
        return Err(invalid!("forest needs at least one covariate"));
    }
    let n_bags = params.n_trees / BAG_SIZE;
    let grown: Vec<(Vec<u32>, Vec<HonestTree>)> = (0..n_bags)
        .into_par_iter()
        .map(|b| grow_bag(x, &y_resid, &t_resid, params, b))
        .collect::<Result<_>>()?;
    let mut bags = Vec::with_capacity(n_bags);
    let mut trees = Vec::with_capacity(params.n_trees);
    for (h, ts) in grown {
        bags.push(h);
        trees.extend(ts);
    }
    Ok(CausalForestModel {
        format_version: FOREST_FORMAT_VERSION,
        params: params.clone(),
        n,
        n_features: x.ncols(),
        y_resid,
        t_resid,
        trees,
        bags,
    })
}

/// Center with `centering` over `k` folds, then grow the forest. Fold and
/// learner seeds derive from `params.seed`.
pub fn fit_causal_forest(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    t: &[f64],
    params: &ForestParams,
    centering: &LearnerSpec,
    k: usize,
) -> Result<CausalForestModel> {
    params.validate()?;
    let plan = make_folds(y.len(), k, rng::derive_named(params.seed, "centering-folds"))?;
    let spec = centering.with_seed(rng::derive_named(params.seed, "centering-learner"));
    let res = center(x, y, t, &spec, &plan)?;
    let forest_params = ForestParams {
        seed: rng::derive_named(params.seed, "forest"),
        ..params.clone()
    };
    let mut model = fit_forest(x, res.y_resid, res.t_resid, &forest_params)?;
    model.params.seed = params.seed;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    /// NaN when undefined.
    pub tau: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub defined: bool,
    /// The raw variance estimate was negative and is reported as 0.
    pub clamped: bool,
    pub n_trees: usize,
}

impl CateEstimate {
    fn undefined(n_trees: usize) -> Self {
        Self {
            tau: f64::NAN,
            variance: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            defined: false,
            clamped: false,
            n_trees,
        }
    }

    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }
}

impl CausalForestModel {
    pub fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(())
    }

    fn in_bag(&self, bag: usize, i: usize) -> bool {
        self.bags[bag].binary_search(&(i as u32)).is_ok()
    }

    /// `w_i(x)` over all training rows, using trees accepted by `use_bag`.
    fn weights_filtered(&self, row: &[f64], use_bag: &dyn Fn(usize) -> bool) -> Vec<f64> {
        let mut w = vec![0.0; self.n];
        let used: Vec<&HonestTree> = self
            .trees
            .iter()
            .enumerate()
            .filter(|(b, _)| use_bag(b / BAG_SIZE))
            .map(|(_, t)| t)
            .collect();
        let b = used.len() as f64;
        for t in used {
            let leaf = t.tree.leaf_index(row);
            let size = t.leaf_stats[leaf].n;
            if size == 0.0 {
                continue;
            }
            for (&i, &l) in t.estimate_rows.iter().zip(&t.estimate_leaves) {
                if l as usize == leaf {
                    w[i as usize] += 1.0 / (b * size);
                }
            }
        }
        w
    }

    /// Forest kernel weights at `row`.
    pub fn forest_weights(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_row(row)?;
        Ok(self.weights_filtered(row, &|_| true))
    }

    fn cate_filtered(&self, row: &[f64], use_bag: &dyn Fn(usize) -> bool) -> CateEstimate {
        let leaves: Vec<(usize, &LeafStats)> = self
            .trees
            .iter()
            .enumerate()
            .filter(|(b, _)| use_bag(b / BAG_SIZE))
            .map(|(b, t)| (b / BAG_SIZE, t.leaf_stats_at(row)))
            .filter(|(_, s)| s.n > 0.0)
            .collect();
        let nb = leaves.len();
        if nb == 0 {
            return CateEstimate::undefined(0);
        }
        let bf = nb as f64;
        let tbar = leaves.iter().map(|(_, s)| s.sum_t / s.n).sum::<f64>() / bf;
        let ybar = leaves.iter().map(|(_, s)| s.sum_y / s.n).sum::<f64>() / bf;
        // per-tree centered second moments about the forest means
        let centered = |s: &LeafStats| {
            let a = s.sum_tt - 2.0 * tbar * s.sum_t + s.n * tbar * tbar;
            let c = s.sum_ty - tbar * s.sum_y - ybar * s.sum_t + s.n * tbar * ybar;
            (a / s.n, c / s.n)
        };
        let (mut a, mut c) = (0.0, 0.0);
        for (_, s) in &leaves {
            let (ab, cb) = centered(s);
            a += ab;
            c += cb;
        }
        let (a, c) = (a / bf, c / bf);
        let scale = leaves.iter().map(|(_, s)| s.sum_tt / s.n).sum::<f64>() / bf;
        if !(a > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return CateEstimate::undefined(nb);
        }
        let tau = c / a;

        // little bags on the linearized score
        let psi: Vec<(usize, f64)> = leaves
            .iter()
            .map(|(g, s)| {
                let (ab, cb) = centered(s);
                (*g, cb - tau * ab)
            })
            .collect();
        let mut groups: Vec<(usize, Vec<f64>)> = Vec::new();
        for (g, p) in psi {
            match groups.last_mut() {
                Some((last, v)) if *last == g => v.push(p),
                _ => groups.push((g, vec![p])),
            }
        }
        groups.retain(|(_, v)| v.len() == BAG_SIZE);
        let (variance, clamped) = if groups.len() < 2 {
            (f64::NAN, false)
        } else {
            let ng = groups.len() as f64;
            let means: Vec<f64> = groups.iter().map(|(_, v)| stats::mean(v)).collect();
            let grand = stats::mean(&means);
            let between = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / ng;
            let within = groups
                .iter()
                .zip(&means)
                .map(|((_, v), m)| v.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (BAG_SIZE - 1) as f64)
                .sum::<f64>()
                / ng;
            let l = BAG_SIZE as f64;
            let raw = (between - within / l + within / (l * ng)) / (a * a);
            if raw < 0.0 {
                (0.0, true)
            } else {
                (raw, false)
            }
        };
        let half = stats::Z_975 * variance.sqrt();
        CateEstimate {
            tau,
            variance,
            ci_low: tau - half,
            ci_high: tau + half,
            defined: true,
            clamped,
            n_trees: nb,
        }
    }

    /// CATE at an arbitrary point, using every tree.
    pub fn estimate_cate(&self, row: &[f64]) -> Result<CateEstimate> {
        self.check_row(row)?;
        Ok(self.cate_filtered(row, &|_| true))
    }

    /// Out-of-bag CATE for each training row: only bags whose half-sample
    /// excludes the row contribute.
    pub fn oob_cates(&self, x: ArrayView2<'_, f64>) -> Result<Vec<CateEstimate>> {
        if x.nrows() != self.n || x.ncols() != self.n_features {
            return Err(invalid!(
                "expected the {}x{} training matrix, got {}x{}",
                self.n,
                self.n_features,
                x.nrows(),
                x.ncols()
            ));
        }
        Ok((0..self.n)
            .into_par_iter()
            .map(|i| {
                let row = x.row(i).to_vec();
                self.cate_filtered(&row, &|g| !self.in_bag(g, i))
            })
            .collect())
    }

    pub fn cates(&self, x: ArrayView2<'_, f64>) -> Result<Vec<CateEstimate>> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|i| self.cate_filtered(&x.row(i).to_vec(), &|_| true))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != FOREST_FORMAT_VERSION {
            return Err(invalid!(
                "unsupported forest format version {} (expected {FOREST_FORMAT_VERSION})",
                m.format_version
            ));
        }
        Ok(m)
    }
}

/// Mean of the defined CATEs. The standard error combines the mean CATE
/// standard error (a bound on the forest noise of the average) with the
/// sampling variance of the mean over rows.
pub fn estimate_ate(cates: &[CateEstimate], seed: u64) -> Result<DmlEstimate> {
    let valid: Vec<&CateEstimate> = cates.iter().filter(|c| c.defined).collect();
    let undefined = cates.len() - valid.len();
    if undefined * 2 > cates.len() {
        return Err(degenerate!("{undefined} of {} CATEs are undefined", cates.len()));
    }
    if valid.len() < MIN_VALID_CATES {
        return Err(degenerate!(
            "only {} defined CATEs (need {MIN_VALID_CATES})",
            valid.len()
        ));
    }
    let taus: Vec<f64> = valid.iter().map(|c| c.tau).collect();
    let sds: Vec<f64> = valid.iter().filter(|c| c.variance.is_finite()).map(|c| c.se()).collect();
    let forest_sd = if sds.is_empty() { 0.0 } else { stats::mean(&sds) };
    let se = (forest_sd * forest_sd + stats::sample_var(&taus) / taus.len() as f64).sqrt();
    Ok(DmlEstimate::from_theta_se(stats::mean(&taus), se, "causal_forest", taus.len(), seed))
}

/// A fitted forest with its out-of-bag CATEs and ATE.
#[derive(Debug, Clone)]
pub struct ForestRun {
    pub model: CausalForestModel,
    pub cates: Vec<CateEstimate>,
    pub ate: DmlEstimate,
}

/// [`fit_causal_forest`], then out-of-bag CATEs and their ATE.
pub fn run_forest(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    t: &[f64],
    params: &ForestParams,
    centering: &LearnerSpec,
    k: usize,
) -> Result<ForestRun> {
    let model = fit_causal_forest(x, y, t, params, centering, k)?;
    let cates = model.oob_cates(x)?;
    let ate = estimate_ate(&cates, params.seed)?;
    Ok(ForestRun { model, cates, ate })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// `cell_id,tau,variance,ci_low,ci_high,defined`; undefined values are empty.
pub fn write_cate_csv(path: &Path, ids: &[u64], cates: &[CateEstimate]) -> Result<()> {
    if ids.len() != cates.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: cates.len(),
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_id", "tau", "variance", "ci_low", "ci_high", "defined"])?;
    for (id, c) in ids.iter().zip(cates) {
        w.write_record([
            id.to_string(),
            fmt(c.tau),
            fmt(c.variance),
            fmt(c.ci_low),
            fmt(c.ci_high),
            c.defined.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn single_leaf_model(t: Vec<f64>, y: Vec<f64>) -> CausalForestModel {
        let n = t.len();
        let x = Array2::<f64>::zeros((n, 1));
        let mut tree = HonestTree {
            tree: Tree::leaf(0.0, n as f64),
            split_rows: vec![],
            estimate_rows: (0..n as u32).collect(),
            estimate_leaves: vec![],
            leaf_stats: vec![],
        };
        tree.fill_leaf_stats(x.view(), &y, &t);
        CausalForestModel {
            format_version: FOREST_FORMAT_VERSION,
            params: ForestParams::new(2, 0),
            n,
            n_features: 1,
            y_resid: y,
            t_resid: t,
            trees: vec![tree],
            bags: vec![vec![]],
        }
    }

    #[test]
    fn hand_single_leaf() {
        let m = single_leaf_model(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 4.0]);
        let c = m.estimate_cate(&[0.0]).unwrap();
        assert_eq!(c.tau, 2.0);
        let w = m.forest_weights(&[0.0]).unwrap();
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn uniform_weights_give_sample_slope() {
        let mut r = rng::rng(1);
        let t: Vec<f64> = (0..50).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = t.iter().map(|v| 0.7 * v + r.sample::<f64, _>(StandardNormal)).collect();
        let m = single_leaf_model(t.clone(), y.clone());
        let (tm, ym) = (stats::mean(&t), stats::mean(&y));
        let sxy: f64 = t.iter().zip(&y).map(|(a, b)| (a - tm) * (b - ym)).sum();
        let sxx: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
        assert!((m.estimate_cate(&[0.0]).unwrap().tau - sxy / sxx).abs() < 1e-12);
    }

    fn hetero(n: usize, seed: u64, tau: impl Fn(&[f64]) -> f64) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let mut r = rng::rng(seed);
        let x: Array2<f64> = Array2::from_shape_fn((n, 3), |_| r.sample(StandardNormal));
        let t: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let row = x.row(i).to_vec();
                tau(&row) * t[i] + row[1] + r.sample::<f64, _>(StandardNormal)
            })
            .collect();
        (x, y, t)
    }

    #[test]
    fn weights_lie_on_the_simplex() {
        let (x, y, t) = hetero(300, 2, |r| r[0]);
        let m = fit_forest(x.view(), y, t, &ForestParams::new(20, 3)).unwrap();
        let mut r = rng::rng(9);
        for _ in 0..100 {
            let q: Vec<f64> = (0..3).map(|_| r.sample(StandardNormal)).collect();
            let w = m.forest_weights(&q).unwrap();
            assert!(w.iter().all(|v| *v >= 0.0));
            let s: f64 = w.iter().sum();
            assert!((1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn duplicate_trees_keep_weights() {
        let (x, y, t) = hetero(200, 4, |r| r[0]);
        let m = fit_forest(x.view(), y, t, &ForestParams::new(2, 5)).unwrap();
        let mut one = m.clone();
        one.trees.truncate(1);
        let mut two = one.clone();
        two.trees.push(one.trees[0].clone());
        let q = x.row(0).to_vec();
        let (a, b) = (one.forest_weights(&q).unwrap(), two.forest_weights(&q).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
        // identical bag members: no between or within spread
        let mut same = m.clone();
        same.trees = vec![one.trees[0].clone(); 4];
        same.bags = vec![m.bags[0].clone(); 2];
        let c = same.estimate_cate(&q).unwrap();
        assert!(c.variance.abs() < 1e-20, "{c:?}");
    }

    #[test]
    fn min_leaf_equal_to_estimate_half_gives_root_only() {
        let (x, y, t) = hetero(200, 6, |r| if r[0] > 0.0 { 3.0 } else { -3.0 });
        let p = ForestParams {
            min_leaf: 50,
            ..ForestParams::new(4, 1)
        };
        let m = fit_forest(x.view(), y, t, &p).unwrap();
        assert!(m.trees.iter().all(|t| t.estimate_rows.len() == 50 && t.tree.nodes.len() == 1));
    }

    #[test]
    fn honest_and_split_halves_are_disjoint() {
        let (x, y, t) = hetero(200, 7, |r| r[0]);
        let m = fit_forest(x.view(), y, t, &ForestParams::new(6, 2)).unwrap();
        for tr in &m.trees {
            assert!(tr.split_rows.iter().all(|r| tr.estimate_rows.binary_search(r).is_err()));
        }
    }

    #[test]
    fn poisoning_split_rows_leaves_leaf_stats_alone() {
        let (x, y, t) = hetero(300, 8, |r| r[0]);
        let m = fit_forest(x.view(), y.clone(), t.clone(), &ForestParams::new(4, 2)).unwrap();
        for tr in &m.trees {
            let mut y2 = y.clone();
            for &j in &tr.split_rows {
                y2[j as usize] += 1e6;
            }
            let mut again = tr.clone();
            again.fill_leaf_stats(x.view(), &y2, &t);
            assert_eq!(
                serde_json::to_string(&again.leaf_stats).unwrap(),
                serde_json::to_string(&tr.leaf_stats).unwrap()
            );
        }
    }

    #[test]
    fn thread_count_does_not_change_the_forest() {
        let (x, y, t) = hetero(200, 9, |r| r[0]);
        let p = ForestParams::new(8, 4);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| fit_forest(x.view(), y.clone(), t.clone(), &p).unwrap());
        let b = four.install(|| fit_forest(x.view(), y.clone(), t.clone(), &p).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let (x, y, t) = hetero(100, 10, |r| r[0]);
        let m = fit_forest(x.view(), y, t, &ForestParams::new(2, 1)).unwrap();
        let back = CausalForestModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ate_rejects_mostly_undefined() {
        let mut cates = vec![CateEstimate::undefined(0); 20];
        for c in cates.iter_mut().take(5) {
            *c = CateEstimate {
                tau: 1.0,
                variance: 0.1,
                ci_low: 0.0,
                ci_high: 2.0,
                defined: true,
                clamped: false,
                n_trees: 2,
            };
        }
        assert!(estimate_ate(&cates, 0).is_err());
    }
}
