//! Shapley attributions for tree ensembles.
//!
//! Conditioning on a feature subset `S` follows the tree paths: a split on a
//! feature in `S` takes `x`'s branch, any other split averages both branches
//! by training cover. `tree_shap` is the polynomial path algorithm;
//! `brute_shap` enumerates every subset and serves as its oracle.

pub mod lowess;

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::learners::{Tree, TreeEnsemble, TreeNode};
use crate::rng;

pub use lowess::{lowess, LowessCurve, DEFAULT_FRAC, DEFAULT_ITERS};

/// Largest feature count for subset enumeration.
pub const MAX_ENUM_FEATURES: usize = 15;
pub const DEFAULT_INTERACTION_SAMPLE: usize = 200;
pub const MIN_DEPENDENCE_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub instance: u64,
    /// Expected prediction with no feature known.
    pub base: f64,
    pub phi: Vec<f64>,
}

impl ShapExplanation {
    pub fn prediction(&self) -> f64 {
        self.base + self.phi.iter().sum::<f64>()
    }
}

fn check_row(model: &TreeEnsemble, x: &[f64]) -> Result<()> {
    if x.len() != model.n_features {
        return Err(Error::DimensionMismatch {
            expected: model.n_features,
            got: x.len(),
        });
    }
    Ok(())
}

fn child_fractions(t: &Tree, left: usize, right: usize) -> (f64, f64) {
    let (cl, cr) = (t.nodes[left].cover(), t.nodes[right].cover());
    if cl + cr > 0.0 {
        (cl / (cl + cr), cr / (cl + cr))
    } else {
        (0.5, 0.5)
    }
}

fn tree_expectation(t: &Tree, node: usize, x: &[f64], known: &dyn Fn(usize) -> bool) -> f64 {
    match t.nodes[node] {
        TreeNode::Leaf { value, .. } => value,
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            if known(feature) {
                let next = if x[feature] <= threshold { left } else { right };
                tree_expectation(t, next, x, known)
            } else {
                let (fl, fr) = child_fractions(t, left, right);
                fl * tree_expectation(t, left, x, known) + fr * tree_expectation(t, right, x, known)
            }
        }
    }
}

/// `f_x(S)`: the ensemble's expected output when only features in `subset`
/// are known.
pub fn conditional_expectation(model: &TreeEnsemble, x: &[f64], subset: &[usize]) -> Result<f64> {
    check_row(model, x)?;
    if let Some(&j) = subset.iter().find(|&&j| j >= model.n_features) {
        return Err(invalid!("feature {j} out of range for {} features", model.n_features));
    }
    let known = |f: usize| subset.contains(&f);
    let s: f64 = model.trees.iter().map(|t| tree_expectation(t, 0, x, &known)).sum();
    Ok(model.offset() + model.tree_weight() * s)
}

/// Expected prediction over the training distribution.
pub fn base_value(model: &TreeEnsemble) -> f64 {
    let none = |_: usize| false;
    let s: f64 = model.trees.iter().map(|t| tree_expectation(t, 0, &[], &none)).sum();
    model.offset() + model.tree_weight() * s
}

/// `f_x(S)` for every subset `S`, indexed by bitmask.
fn all_subset_values(model: &TreeEnsemble, x: &[f64]) -> Vec<f64> {
    let p = model.n_features;
    let mut out = vec![model.offset(); 1 << p];
    let w = model.tree_weight();
    for t in &model.trees {
        let mut used: Vec<usize> = t
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        used.sort_unstable();
        used.dedup();
        let local: Vec<f64> = (0..1usize << used.len())
            .map(|m| {
                let known = |f: usize| used.iter().position(|&u| u == f).is_some_and(|k| m >> k & 1 == 1);
                tree_expectation(t, 0, x, &known)
            })
            .collect();
        for (mask, o) in out.iter_mut().enumerate() {
            let mut m = 0;
            for (k, &f) in used.iter().enumerate() {
                m |= (mask >> f & 1) << k;
            }
            *o += w * local[m];
        }
    }
    out
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

fn refuse_large(p: usize) -> Result<()> {
    if p > MAX_ENUM_FEATURES {
        return Err(Error::Refused(format!(
            "subset enumeration over {p} features (limit {MAX_ENUM_FEATURES})"
        )));
    }
    Ok(())
}

/// Exact Shapley values by enumerating all `2^p` subsets.
pub fn brute_shap(model: &TreeEnsemble, x: &[f64]) -> Result<ShapExplanation> {
    check_row(model, x)?;
    let p = model.n_features;
    refuse_large(p)?;
    let v = all_subset_values(model, x);
    let fact = factorials(p);
    let mut phi = vec![0.0; p];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1 << i;
        for s in 0..1usize << p {
            if s & bit == 0 {
                let k = s.count_ones() as usize;
                *phi_i += fact[k] * fact[p - k - 1] / fact[p] * (v[s | bit] - v[s]);
            }
        }
    }
    Ok(ShapExplanation {
        instance: 0,
        base: v[0],
        phi,
    })
}

#[derive(Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let l = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / (l + 1) as f64;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / (l + 1) as f64;
    }
}

fn unwind(path: &mut Vec<PathElem>, i: usize) {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut next = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let tmp = path[j].weight;
            path[j].weight = next * (l + 1) as f64 / ((j + 1) as f64 * one);
            next = tmp - path[j].weight * zero * (l - j) as f64 / (l + 1) as f64;
        } else {
            path[j].weight = path[j].weight * (l + 1) as f64 / (zero * (l - j) as f64);
        }
    }
    for j in i..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], i: usize) -> f64 {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut next = path[l].weight;
    let mut total = 0.0;
    for j in (0..l).rev() {
        if one != 0.0 {
            let tmp = next * (l + 1) as f64 / ((j + 1) as f64 * one);
            total += tmp;
            next = path[j].weight - tmp * zero * (l - j) as f64 / (l + 1) as f64;
        } else {
            total += path[j].weight / zero * (l + 1) as f64 / (l - j) as f64;
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    t: &Tree,
    node: usize,
    x: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
) {
    extend(&mut path, zero, one, feature);
    match t.nodes[node] {
        TreeNode::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let e = path[i];
                phi[e.feature.expect("only the root element lacks a feature")] += w * (e.one - e.zero) * value;
            }
        }
        TreeNode::Split {
            feature: f,
            threshold,
            left,
            right,
            ..
        } => {
            let (fl, fr) = child_fractions(t, left, right);
            let (hot, cold, fh, fc) = if x[f] <= threshold {
                (left, right, fl, fr)
            } else {
                (right, left, fr, fl)
            };
            let (mut iz, mut io) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(f)) {
                iz = path[k].zero;
                io = path[k].one;
                unwind(&mut path, k);
            }
            if fc > 0.0 {
                recurse(t, hot, x, phi, path.clone(), iz * fh, io, Some(f));
                recurse(t, cold, x, phi, path, iz * fc, 0.0, Some(f));
            } else {
                recurse(t, hot, x, phi, path, iz * fh, io, Some(f));
            }
        }
    }
}

fn tree_shap_row(model: &TreeEnsemble, x: &[f64], base: f64, instance: u64) -> ShapExplanation {
    let mut phi = vec![0.0; model.n_features];
    let mut tree_phi = vec![0.0; model.n_features];
    for t in &model.trees {
        tree_phi.iter_mut().for_each(|v| *v = 0.0);
        recurse(t, 0, x, &mut tree_phi, Vec::with_capacity(t.depth() + 2), 1.0, 1.0, None);
        for (a, b) in phi.iter_mut().zip(&tree_phi) {
            *a += b;
        }
    }
    let w = model.tree_weight();
    phi.iter_mut().for_each(|v| *v *= w);
    ShapExplanation { instance, base, phi }
}

/// Path-algorithm Shapley values for every row of `x`. `ids` label the
/// explanations; row positions are used when absent.
pub fn tree_shap(model: &TreeEnsemble, x: ArrayView2<'_, f64>, ids: Option<&[u64]>) -> Result<Vec<ShapExplanation>> {
    if x.ncols() != model.n_features {
        return Err(Error::DimensionMismatch {
            expected: model.n_features,
            got: x.ncols(),
        });
    }
    if let Some(ids) = ids {
        if ids.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: ids.len(),
            });
        }
    }
    let base = base_value(model);
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).to_vec();
            tree_shap_row(model, &row, base, ids.map_or(i as u64, |d| d[i]))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_phi: f64,
}

/// Mean |φ| per feature, sorted descending with ties by name.
pub fn global_importance(explanations: &[ShapExplanation], names: &[String]) -> Result<Vec<FeatureImportance>> {
    let first = explanations
        .first()
        .ok_or_else(|| invalid!("global importance needs at least one explanation"))?;
    let p = first.phi.len();
    if names.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: names.len(),
        });
    }
    let mut sums = vec![0.0; p];
    for e in explanations {
        if e.phi.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: e.phi.len(),
            });
        }
        for (s, v) in sums.iter_mut().zip(&e.phi) {
            *s += v.abs();
        }
    }
    let n = explanations.len() as f64;
    let mut out: Vec<FeatureImportance> = names
        .iter()
        .zip(sums)
        .map(|(f, s)| FeatureImportance {
            feature: f.clone(),
            mean_abs_phi: s / n,
        })
        .collect();
    out.sort_by(|a, b| {
        b.mean_abs_phi
            .total_cmp(&a.mean_abs_phi)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    Ok(out)
}

/// Shapley interaction values for one instance. Off-diagonal pairs split the
/// interaction index symmetrically; the diagonal holds main effects, so all
/// entries sum to `f(x) − base`.
pub fn interaction_values(model: &TreeEnsemble, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_row(model, x)?;
    let p = model.n_features;
    refuse_large(p)?;
    let v = all_subset_values(model, x);
    let fact = factorials(p.max(1));
    let mut m = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in i + 1..p {
            let (bi, bj) = (1usize << i, 1usize << j);
            let mut total = 0.0;
            for s in 0..1usize << p {
                if s & (bi | bj) == 0 {
                    let k = s.count_ones() as usize;
                    let w = fact[k] * fact[p - k - 2] / (2.0 * fact[p - 1]);
                    total += w * (v[s | bi | bj] - v[s | bi] - v[s | bj] + v[s]);
                }
            }
            m[i][j] = total;
            m[j][i] = total;
        }
    }
    let phi = brute_shap(model, x)?.phi;
    for i in 0..p {
        let off: f64 = (0..p).filter(|&j| j != i).map(|j| m[i][j]).sum();
        m[i][i] = phi[i] - off;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub features: Vec<String>,
    /// Mean absolute interaction value; diagonal is mean |main effect|.
    pub values: Vec<Vec<f64>>,
    pub n_samples: usize,
}

/// Averages absolute interaction values over at most `max_samples` rows,
/// drawn without replacement by `seed` when `x` is larger.
pub fn interaction_matrix(
    model: &TreeEnsemble,
    x: ArrayView2<'_, f64>,
    names: &[String],
    max_samples: usize,
    seed: u64,
) -> Result<InteractionMatrix> {
    let p = model.n_features;
    refuse_large(p)?;
    if names.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: names.len(),
        });
    }
    if x.nrows() == 0 || max_samples == 0 {
        return Err(invalid!("interaction matrix needs at least one instance"));
    }
    let mut rows: Vec<usize> = if x.nrows() > max_samples {
        sample(&mut rng::rng(seed), x.nrows(), max_samples).into_vec()
    } else {
        (0..x.nrows()).collect()
    };
    rows.sort_unstable();
    let per: Vec<Vec<Vec<f64>>> = rows
        .par_iter()
        .map(|&i| interaction_values(model, &x.row(i).to_vec()))
        .collect::<Result<_>>()?;
    let mut values = vec![vec![0.0; p]; p];
    for m in &per {
        for i in 0..p {
            for j in 0..p {
                values[i][j] += m[i][j].abs();
            }
        }
    }
    let n = per.len() as f64;
    values.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(InteractionMatrix {
        features: names.to_vec(),
        values,
        n_samples: per.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceCurve {
    pub feature: String,
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    pub smooth: LowessCurve,
}

/// `(x_j, φ_j)` scatter with its LOWESS smooth.
pub fn dependence_data(
    explanations: &[ShapExplanation],
    x: ArrayView2<'_, f64>,
    j: usize,
    name: &str,
    frac: f64,
    iters: usize,
) -> Result<DependenceCurve> {
    if explanations.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: explanations.len(),
        });
    }
    if j >= x.ncols() {
        return Err(invalid!("feature {j} out of range for {} columns", x.ncols()));
    }
    if explanations.len() < MIN_DEPENDENCE_POINTS {
        return Err(invalid!(
            "dependence smoothing needs at least {MIN_DEPENDENCE_POINTS} points, got {}",
            explanations.len()
        ));
    }
    let xs: Vec<f64> = x.column(j).to_vec();
    let phi: Vec<f64> = explanations.iter().map(|e| e.phi[j]).collect();
    let smooth = lowess(&xs, &phi, frac, iters)?;
    Ok(DependenceCurve {
        feature: name.to_string(),
        x: xs,
        phi,
        smooth,
    })
}

/// `model,feature,mean_abs_phi,rank` for each labelled ranking.
pub fn write_importance_csv(path: &Path, rankings: &[(String, Vec<FeatureImportance>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "feature", "mean_abs_phi", "rank"])?;
    for (model, ranking) in rankings {
        for (r, f) in ranking.iter().enumerate() {
            w.write_record([model.clone(), f.feature.clone(), f.mean_abs_phi.to_string(), (r + 1).to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Long format, one row per ordered pair: `model,feature_i,feature_j,strength`.
pub fn write_interactions_csv(path: &Path, matrices: &[(String, InteractionMatrix)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "feature_i", "feature_j", "strength"])?;
    for (model, m) in matrices {
        for (i, fi) in m.features.iter().enumerate() {
            for (j, fj) in m.features.iter().enumerate() {
                w.write_record([model.clone(), fi.clone(), fj.clone(), m.values[i][j].to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `model,x,phi,lowess_x,lowess_y`; row `k` pairs the `k`-th scatter point
/// with the `k`-th smoothed point.
pub fn write_dependence_csv(path: &Path, curves: &[(String, DependenceCurve)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "x", "phi", "lowess_x", "lowess_y"])?;
    for (model, c) in curves {
        for k in 0..c.x.len() {
            w.write_record([
                model.clone(),
                c.x[k].to_string(),
                c.phi[k].to_string(),
                c.smooth.x[k].to_string(),
                c.smooth.y[k].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
