//! Seeded random search over a hyperparameter grid, scored by K-fold
//! cross-validated mean squared error.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ensemble::{fit, LearnerKind, LearnerSpec};
use crate::dml::make_folds;
use crate::error::{invalid, Result};
use crate::rng;

/// Candidate values per hyperparameter. An empty list keeps the template's
/// value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default)]
    pub max_depth: Vec<usize>,
    #[serde(default)]
    pub max_leaves: Vec<usize>,
    #[serde(default)]
    pub n_trees: Vec<usize>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
    #[serde(default)]
    pub min_leaf: Vec<usize>,
    #[serde(default)]
    pub row_subsample: Vec<f64>,
}

impl SearchSpace {
    /// Default grid: depth 2-8 (or 7-63 leaves for leaf-wise boosting), 100-500
    /// trees, learning rate {0.03, 0.1, 0.3} for boosted kinds, min_leaf
    /// {5, 20}, row subsample {0.7, 1.0}.
    pub fn default_for(kind: LearnerKind) -> Self {
        let mut s = SearchSpace {
            n_trees: vec![100, 200, 300, 400, 500],
            min_leaf: vec![5, 20],
            row_subsample: vec![0.7, 1.0],
            ..SearchSpace::default()
        };
        if kind == LearnerKind::GbtLeafwise {
            s.max_leaves = vec![7, 15, 31, 63];
        } else {
            s.max_depth = (2..=8).collect();
        }
        if kind.is_boosted() {
            s.learning_rate = vec![0.03, 0.1, 0.3];
        }
        s
    }

    /// Every grid point in a fixed order.
    pub fn expand(&self, template: &LearnerSpec) -> Vec<LearnerSpec> {
        let mut out = vec![template.clone()];
        macro_rules! axis {
            ($field:ident, $set:expr) => {
                if !self.$field.is_empty() {
                    out = out
                        .iter()
                        .flat_map(|s| {
                            self.$field.iter().map(move |v| {
                                let mut c = s.clone();
                                #[allow(clippy::redundant_closure_call)]
                                ($set)(&mut c, *v);
                                c
                            })
                        })
                        .collect();
                }
            };
        }
        axis!(max_depth, |c: &mut LearnerSpec, v| c.max_depth = Some(v));
        axis!(max_leaves, |c: &mut LearnerSpec, v| c.max_leaves = Some(v));
        axis!(n_trees, |c: &mut LearnerSpec, v| c.n_trees = v);
        axis!(learning_rate, |c: &mut LearnerSpec, v| c.learning_rate = v);
        axis!(min_leaf, |c: &mut LearnerSpec, v| c.min_leaf = v);
        axis!(row_subsample, |c: &mut LearnerSpec, v| c.row_subsample = v);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneTrial {
    pub spec: LearnerSpec,
    /// `None` when fitting failed in some fold.
    pub cv_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: LearnerSpec,
    pub best_mse: f64,
    pub trials: Vec<TuneTrial>,
}

/// Cross-validated MSE of `spec` on `(x, y)` with the given fold plan.
pub fn cv_mse(spec: &LearnerSpec, x: ArrayView2<'_, f64>, y: &[f64], folds: &[usize], k: usize) -> Result<f64> {
    let mut sse = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        let xt: Array2<f64> = x.select(Axis(0), &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = fit(spec, xt.view(), &yt)?;
        let pred = model.predict(x.select(Axis(0), &test).view())?;
        sse += test.iter().zip(&pred).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>();
    }
    Ok(sse / y.len() as f64)
}

/// Random search: shuffle the grid with `seed`, evaluate the first `budget`
/// points, keep the lowest CV error (earliest wins ties). The returned spec
/// keeps the template's seed.
pub fn tune(
    template: &LearnerSpec,
    space: &SearchSpace,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    budget: usize,
    folds: usize,
    seed: u64,
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(invalid!("tuning budget must be at least 1"));
    }
    let mut grid = space.expand(template);
    grid.shuffle(&mut rng::stream(seed, 0));
    grid.truncate(budget);
    let plan = make_folds(y.len(), folds, rng::derive(seed, 1))?;
    let mut trials = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, spec) in grid.into_iter().enumerate() {
        let mse = match cv_mse(&spec, x, y, &plan.assignment, plan.k) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("tuning trial {i} skipped: {e}");
                None
            }
        };
        if let Some(m) = mse {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((i, m));
            }
        }
        trials.push(TuneTrial { spec, cv_mse: mse });
    }
    let (i, best_mse) = best.ok_or_else(|| invalid!("every tuning trial failed"))?;
    Ok(TuneResult {
        best: trials[i].spec.clone(),
        best_mse,
        trials,
    })
}
