//! Tree ensembles used as nuisance models.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Columns, GrowthPolicy, Grower, ThresholdRule, Tree, TreeParams};
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    /// Bootstrap aggregated trees with per-split feature subsampling.
    BaggedTrees,
    /// Extremely randomized trees: all rows, random thresholds.
    ExtraTrees,
    /// Least-squares boosting with depth-limited trees.
    GbtDepthwise,
    /// Least-squares boosting with best-first trees capped by leaf count.
    GbtLeafwise,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 4] = [
        LearnerKind::BaggedTrees,
        LearnerKind::ExtraTrees,
        LearnerKind::GbtDepthwise,
        LearnerKind::GbtLeafwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::BaggedTrees => "bagged_trees",
            LearnerKind::ExtraTrees => "extra_trees",
            LearnerKind::GbtDepthwise => "gbt_depthwise",
            LearnerKind::GbtLeafwise => "gbt_leafwise",
        }
    }

    pub fn is_boosted(self) -> bool {
        matches!(self, LearnerKind::GbtDepthwise | LearnerKind::GbtLeafwise)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid!("unknown learner kind `{s}`"))
    }
}

/// Learner kind, hyperparameters and seed. Unset optional fields fall back to
/// per-kind defaults (see [`LearnerSpec::new`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub n_trees: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default)]
    pub max_leaves: Option<usize>,
    pub min_leaf: usize,
    #[serde(default = "one")]
    pub learning_rate: f64,
    /// Fraction of features tried at each split.
    #[serde(default = "one")]
    pub feature_subsample: f64,
    /// Bagging: bootstrap size as a fraction of n. Boosting: fraction of rows
    /// drawn without replacement per iteration.
    #[serde(default = "one")]
    pub row_subsample: f64,
    /// Bagging only; `false` fits every tree on all rows.
    #[serde(default = "yes")]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl LearnerSpec {
    /// Default hyperparameters for `kind`.
    pub fn new(kind: LearnerKind, seed: u64) -> Self {
        let base = LearnerSpec {
            kind,
            n_trees: 200,
            max_depth: None,
            max_leaves: None,
            min_leaf: 5,
            learning_rate: 1.0,
            feature_subsample: 1.0,
            row_subsample: 1.0,
            bootstrap: true,
            seed,
        };
        match kind {
            LearnerKind::BaggedTrees => LearnerSpec {
                feature_subsample: 0.5,
                ..base
            },
            LearnerKind::ExtraTrees => LearnerSpec {
                bootstrap: false,
                ..base
            },
            LearnerKind::GbtDepthwise => LearnerSpec {
                max_depth: Some(3),
                learning_rate: 0.1,
                row_subsample: 0.8,
                ..base
            },
            LearnerKind::GbtLeafwise => LearnerSpec {
                max_leaves: Some(8),
                learning_rate: 0.1,
                min_leaf: 10,
                row_subsample: 0.8,
                ..base
            },
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        LearnerSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(invalid!("n_trees must be at least 1"));
        }
        if self.min_leaf == 0 {
            return Err(invalid!("min_leaf must be at least 1"));
        }
        if self.kind.is_boosted() && !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(invalid!(
                "learning_rate must lie in (0, 1], got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [
            ("feature_subsample", self.feature_subsample),
            ("row_subsample", self.row_subsample),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if self.max_leaves.is_some_and(|l| l < 2) {
            return Err(invalid!("max_leaves must be at least 2"));
        }
        Ok(())
    }

    fn tree_params(&self, p: usize) -> TreeParams {
        let mtry = if self.feature_subsample >= 1.0 {
            None
        } else {
            Some(((self.feature_subsample * p as f64).round() as usize).clamp(1, p))
        };
        TreeParams {
            max_depth: self.max_depth,
            max_leaves: self.max_leaves,
            min_leaf: self.min_leaf,
            mtry,
            threshold: if self.kind == LearnerKind::ExtraTrees {
                ThresholdRule::Random
            } else {
                ThresholdRule::Best
            },
            growth: if self.kind == LearnerKind::GbtLeafwise {
                GrowthPolicy::BestFirst
            } else {
                GrowthPolicy::DepthFirst
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Combination {
    /// Average of tree outputs.
    Mean,
    /// `base_score + learning_rate * Σ tree(x)`.
    Boosted { learning_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    pub combination: Combination,
    pub base_score: f64,
    pub n_features: usize,
}

impl TreeEnsemble {
    /// Weight each tree's output receives in the prediction.
    pub fn tree_weight(&self) -> f64 {
        match self.combination {
            Combination::Mean if self.trees.is_empty() => 0.0,
            Combination::Mean => 1.0 / self.trees.len() as f64,
            Combination::Boosted { learning_rate } => learning_rate,
        }
    }

    /// Constant added to the weighted tree sum.
    pub fn offset(&self) -> f64 {
        match self.combination {
            Combination::Mean if !self.trees.is_empty() => 0.0,
            _ => self.base_score,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        self.offset() + self.tree_weight() * s
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        let mut row = vec![0.0; self.n_features];
        Ok(x.rows()
            .into_iter()
            .map(|r| {
                row.iter_mut().zip(r.iter()).for_each(|(d, s)| *d = *s);
                self.predict_row(&row)
            })
            .collect())
    }

    /// Total split gain per feature, normalized to sum to one. An ensemble
    /// without any split spreads importance uniformly.
    pub fn gain_importance(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_features];
        for t in &self.trees {
            t.accumulate_gain(&mut g);
        }
        let total: f64 = g.iter().sum();
        if total > 0.0 {
            g.iter_mut().for_each(|v| *v /= total);
        } else if self.n_features > 0 {
            g.iter_mut().for_each(|v| *v = 1.0 / self.n_features as f64);
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trees {
            if let Some(f) = t.max_feature() {
                if f >= self.n_features {
                    return Err(invalid!("tree splits on feature {f} of {}", self.n_features));
                }
            }
        }
        Ok(())
    }
}

/// Fit an ensemble of the kind named in `spec`.
pub fn fit(spec: &LearnerSpec, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<TreeEnsemble> {
    spec.validate()?;
    let n = x.nrows();
    if n != y.len() {
        return Err(invalid!("{n} rows in X but {} responses", y.len()));
    }
    if x.ncols() == 0 {
        return Err(invalid!("design matrix has no columns"));
    }
    if n < 2 * spec.min_leaf || n < 2 {
        return Err(invalid!(
            "{n} rows is too few for min_leaf = {}",
            spec.min_leaf
        ));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("response contains non-finite values"));
    }
    let cols = Columns::from_view(x);
    let sorted = cols.presort();
    let params = spec.tree_params(cols.n_features());
    let base_score = y.iter().sum::<f64>() / n as f64;
    let trees = match spec.kind {
        LearnerKind::BaggedTrees | LearnerKind::ExtraTrees => (0..spec.n_trees)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng::stream(spec.seed, b as u64);
                let w = if spec.kind == LearnerKind::BaggedTrees && spec.bootstrap {
                    let draws = ((spec.row_subsample * n as f64).round() as usize).max(1);
                    let mut w = vec![0.0; n];
                    for _ in 0..draws {
                        w[rng.random_range(0..n)] += 1.0;
                    }
                    w
                } else {
                    vec![1.0; n]
                };
                Grower::new(&cols, y, &w, &sorted, &params).grow(&mut rng)
            })
            .collect(),
        LearnerKind::GbtDepthwise | LearnerKind::GbtLeafwise => {
            let lr = spec.learning_rate;
            let mut pred = vec![base_score; n];
            let mut resid = vec![0.0; n];
            let mut trees = Vec::with_capacity(spec.n_trees);
            let keep = ((spec.row_subsample * n as f64).round() as usize).clamp(spec.min_leaf.min(n), n);
            for b in 0..spec.n_trees {
                let mut rng = rng::stream(spec.seed, b as u64);
                for i in 0..n {
                    resid[i] = y[i] - pred[i];
                }
                let w = if keep < n {
                    let mut w = vec![0.0; n];
                    for i in rand::seq::index::sample(&mut rng, n, keep) {
                        w[i] = 1.0;
                    }
                    w
                } else {
                    vec![1.0; n]
                };
                let tree = Grower::new(&cols, &resid, &w, &sorted, &params).grow(&mut rng);
                for (i, p) in pred.iter_mut().enumerate() {
                    *p += lr * predict_cols(&tree, &cols, i);
                }
                trees.push(tree);
            }
            trees
        }
    };
    let combination = if spec.kind.is_boosted() {
        Combination::Boosted {
            learning_rate: spec.learning_rate,
        }
    } else {
        Combination::Mean
    };
    Ok(TreeEnsemble {
        trees,
        combination,
        base_score,
        n_features: cols.n_features(),
    })
}

fn predict_cols(tree: &Tree, cols: &Columns, i: usize) -> f64 {
    use super::tree::TreeNode;
    let mut k = 0;
    loop {
        match tree.nodes[k] {
            TreeNode::Leaf { value, .. } => return value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => k = if cols.cols[feature][i] <= threshold { left } else { right },
        }
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Versioned on-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub spec: LearnerSpec,
    pub seed: u64,
    pub ensemble: TreeEnsemble,
}

impl ModelDocument {
    pub fn new(spec: &LearnerSpec, ensemble: TreeEnsemble) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            spec: spec.clone(),
            seed: spec.seed,
            ensemble,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(invalid!(
                "unsupported model format version {}",
                doc.format_version
            ));
        }
        doc.ensemble.validate()?;
        Ok(doc)
    }
}
