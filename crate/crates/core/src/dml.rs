//! Partially linear double machine learning.
//!
//! `Y = θ·T + g(X) + ε`, `T = m(X) + v`. Outcome and treatment are each
//! residualized on `X` with K-fold cross-fitting, then θ is the no-intercept
//! least-squares slope of outcome residuals on treatment residuals.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid, Error, Result};
use crate::learners::{fit, LearnerSpec};
use crate::rng;
use crate::stats::{self, Z_975};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_REPS: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub k: usize,
    /// Fold id of each row.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_rows(&self, f: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == f).collect()
    }

    pub fn complement_rows(&self, f: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle, then round-robin fold assignment (sizes differ by at most one).
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(invalid!("need at least 2 folds, got {k}"));
    }
    if n < 2 * k {
        return Err(invalid!("{n} rows is too few for {k} folds (need {})", 2 * k));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(seed));
    let mut assignment = vec![0; n];
    for (j, &row) in perm.iter().enumerate() {
        assignment[row] = j % k;
    }
    Ok(FoldPlan {
        n,
        k,
        assignment,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    /// `Y - ĝ(X)`, with ĝ fitted outside the row's fold.
    pub y_resid: Vec<f64>,
    /// `T - m̂(X)`, with m̂ fitted outside the row's fold.
    pub t_resid: Vec<f64>,
    pub fold: Vec<usize>,
}

fn check_shapes(x: ArrayView2<'_, f64>, y: &[f64], t: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.len() != t.len() {
        return Err(invalid!(
            "row counts differ: X {}, Y {}, T {}",
            x.nrows(),
            y.len(),
            t.len()
        ));
    }
    if x.iter().chain(y).chain(t).any(|v| !v.is_finite()) {
        return Err(invalid!("inputs contain missing or non-finite values"));
    }
    Ok(())
}

/// Cross-fitted residuals. Fold `f`'s nuisance models see only rows outside
/// `f`; their seeds derive from `spec.seed` and the fold index.
pub fn crossfit_residuals(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    t: &[f64],
    plan: &FoldPlan,
) -> Result<ResidualSet> {
    check_shapes(x, y, t)?;
    if plan.n != y.len() {
        return Err(invalid!("fold plan covers {} rows, data has {}", plan.n, y.len()));
    }
    let n = y.len();
    let mut y_resid = vec![0.0; n];
    let mut t_resid = vec![0.0; n];
    for f in 0..plan.k {
        let train = plan.complement_rows(f);
        let test = plan.fold_rows(f);
        let t_train: Vec<f64> = train.iter().map(|&i| t[i]).collect();
        if stats::sample_var(&t_train) <= 0.0 {
            return Err(degenerate!(
                "treatment has zero variance outside fold {f}"
            ));
        }
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let x_train = x.select(Axis(0), &train);
        let x_test = x.select(Axis(0), &test);
        let g = fit(&spec.with_seed(rng::derive(spec.seed, 2 * f as u64)), x_train.view(), &y_train)?;
        let m = fit(&spec.with_seed(rng::derive(spec.seed, 2 * f as u64 + 1)), x_train.view(), &t_train)?;
        let g_hat = g.predict(x_test.view())?;
        let m_hat = m.predict(x_test.view())?;
        for (j, &i) in test.iter().enumerate() {
            y_resid[i] = y[i] - g_hat[j];
            t_resid[i] = t[i] - m_hat[j];
        }
    }
    Ok(ResidualSet {
        y_resid,
        t_resid,
        fold: plan.assignment.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub theta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    /// Learner kind, or `ols` / `causal_forest` for the comparison estimators.
    pub estimator: String,
    pub n: usize,
    pub n_reps: usize,
    pub rep_thetas: Vec<f64>,
    pub rep_ses: Vec<f64>,
    pub seed: u64,
}

impl DmlEstimate {
    pub fn from_theta_se(theta: f64, se: f64, estimator: impl Into<String>, n: usize, seed: u64) -> Self {
        Self {
            theta,
            se,
            ci_low: theta - Z_975 * se,
            ci_high: theta + Z_975 * se,
            p_value: stats::two_sided_p(theta, se),
            estimator: estimator.into(),
            n,
            n_reps: 1,
            rep_thetas: vec![theta],
            rep_ses: vec![se],
            seed,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Final stage: `θ = Σ t̃ỹ / Σ t̃²` with heteroskedasticity-robust (HC0)
/// standard error `sqrt(Σ t̃² ε̂²) / Σ t̃²`.
pub fn plr_theta(res: &ResidualSet) -> Result<DmlEstimate> {
    let (t, y) = (&res.t_resid, &res.y_resid);
    let stt: f64 = t.iter().map(|v| v * v).sum();
    if !(stt > 0.0) {
        return Err(degenerate!("treatment residuals have zero variance"));
    }
    let sty: f64 = t.iter().zip(y).map(|(a, b)| a * b).sum();
    let theta = sty / stt;
    let meat: f64 = t
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - theta * a;
            a * a * e * e
        })
        .sum();
    let se = meat.sqrt() / stt;
    Ok(DmlEstimate::from_theta_se(theta, se, "plr", t.len(), 0))
}

/// DML over `reps` independent fold splits. θ̄ is the mean of per-split
/// estimates; its variance is the mean per-split variance plus the
/// between-split variance of θ.
#[allow(clippy::too_many_arguments)]
pub fn repeat_estimate(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    t: &[f64],
    k: usize,
    reps: usize,
    seed: u64,
) -> Result<DmlEstimate> {
    if reps == 0 {
        return Err(invalid!("reps must be at least 1"));
    }
    let per_rep: Vec<DmlEstimate> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed = rng::derive(seed, r as u64);
            let plan = make_folds(y.len(), k, rng::derive(rep_seed, 0))?;
            let res = crossfit_residuals(&spec.with_seed(rng::derive(rep_seed, 1)), x, y, t, &plan)?;
            plr_theta(&res).map_err(|e| invalid!("replication {r}: {e}"))
        })
        .collect::<Result<_>>()?;
    let thetas: Vec<f64> = per_rep.iter().map(|e| e.theta).collect();
    let ses: Vec<f64> = per_rep.iter().map(|e| e.se).collect();
    let theta = stats::mean(&thetas);
    let within = ses.iter().map(|s| s * s).sum::<f64>() / reps as f64;
    let between = if reps > 1 { stats::sample_var(&thetas) } else { 0.0 };
    let mut est = DmlEstimate::from_theta_se(theta, (within + between).sqrt(), spec.kind.as_str(), y.len(), seed);
    est.n_reps = reps;
    est.rep_thetas = thetas;
    est.rep_ses = ses;
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    RobustNegative,
    RobustPositive,
    NotRobust,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::RobustNegative => "robust_negative",
            Verdict::RobustPositive => "robust_positive",
            Verdict::NotRobust => "not_robust",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenCell {
    pub treatment: String,
    pub learner: String,
    pub seed: u64,
    pub estimate: Option<DmlEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentVerdict {
    pub treatment: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub alpha: f64,
    pub cells: Vec<ScreenCell>,
    pub verdicts: Vec<TreatmentVerdict>,
}

impl RobustnessMatrix {
    pub fn verdict(&self, treatment: &str) -> Option<Verdict> {
        self.verdicts
            .iter()
            .find(|v| v.treatment == treatment)
            .map(|v| v.verdict)
    }

    pub fn cell(&self, treatment: &str, learner: &str) -> Option<&ScreenCell> {
        self.cells
            .iter()
            .find(|c| c.treatment == treatment && c.learner == learner)
    }
}

/// Robust only when every learner's estimate is significant at `alpha` with
/// one common sign.
pub fn verdict_for(cells: &[&ScreenCell], alpha: f64) -> Verdict {
    let ests: Option<Vec<&DmlEstimate>> = cells.iter().map(|c| c.estimate.as_ref()).collect();
    match ests {
        Some(e) if !e.is_empty() && e.iter().all(|e| e.significant(alpha)) => {
            if e.iter().all(|e| e.theta < 0.0) {
                Verdict::RobustNegative
            } else if e.iter().all(|e| e.theta > 0.0) {
                Verdict::RobustPositive
            } else {
                Verdict::NotRobust
            }
        }
        _ => Verdict::NotRobust,
    }
}

/// Inputs for the treatment x learner screen.
pub struct ScreenData<'a> {
    pub y: &'a [f64],
    /// Candidate treatments, by name.
    pub treatments: &'a [(String, Vec<f64>)],
    /// Shared covariates.
    pub x: ArrayView2<'a, f64>,
    /// When set, the other candidate treatments join the covariates while one
    /// treatment is being estimated.
    pub rotate_treatments: bool,
}

impl ScreenData<'_> {
    /// Covariate matrix used while estimating treatment `j`.
    pub fn controls_for(&self, j: usize) -> Array2<f64> {
        if !self.rotate_treatments || self.treatments.len() < 2 {
            return self.x.to_owned();
        }
        let others: Vec<&Vec<f64>> = self
            .treatments
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(_, (_, v))| v)
            .collect();
        let extra = Array2::from_shape_fn((self.y.len(), others.len()), |(r, c)| others[c][r]);
        concatenate(Axis(1), &[self.x, extra.view()]).expect("row counts checked by caller")
    }
}

/// One repeated-split DML estimate per (treatment, learner) cell, plus a
/// verdict per treatment. Cell failures are recorded, not propagated.
pub fn robustness_screen(
    data: &ScreenData<'_>,
    learners: &[LearnerSpec],
    k: usize,
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<RobustnessMatrix> {
    if data.treatments.is_empty() {
        return Err(invalid!("robustness screen needs at least one treatment"));
    }
    if learners.is_empty() {
        return Err(invalid!("robustness screen needs at least one learner"));
    }
    let controls: Vec<Array2<f64>> = (0..data.treatments.len()).map(|j| data.controls_for(j)).collect();
    let jobs: Vec<(usize, usize)> = (0..data.treatments.len())
        .flat_map(|j| (0..learners.len()).map(move |l| (j, l)))
        .collect();
    let cells: Vec<ScreenCell> = jobs
        .par_iter()
        .enumerate()
        .map(|(c, &(j, l))| {
            let cell_seed = rng::derive(seed, c as u64);
            let (name, t) = &data.treatments[j];
            let spec = learners[l].with_seed(rng::derive(cell_seed, 1));
            let res = repeat_estimate(&spec, controls[j].view(), data.y, t, k, reps, cell_seed);
            ScreenCell {
                treatment: name.clone(),
                learner: learners[l].kind.as_str().to_string(),
                seed: cell_seed,
                error: res.as_ref().err().map(ToString::to_string),
                estimate: res.ok(),
            }
        })
        .collect();
    let verdicts = data
        .treatments
        .iter()
        .map(|(name, _)| {
            let mine: Vec<&ScreenCell> = cells.iter().filter(|c| &c.treatment == name).collect();
            TreatmentVerdict {
                treatment: name.clone(),
                verdict: verdict_for(&mine, alpha),
            }
        })
        .collect();
    Ok(RobustnessMatrix {
        alpha,
        cells,
        verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept, treatment, then covariates.
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub estimate: DmlEstimate,
}

/// Least squares of `y` on `[1, t, x]`; the reported estimate is the
/// treatment coefficient with an HC1 robust standard error.
pub fn ols_fit(y: &[f64], t: &[f64], x: ArrayView2<'_, f64>, x_names: &[String]) -> Result<OlsFit> {
    check_shapes(x, y, t)?;
    let n = y.len();
    let k = x.ncols() + 2;
    if n <= k {
        return Err(invalid!("{n} rows is too few for {k} regressors"));
    }
    let names: Vec<String> = ["intercept".to_string(), "treatment".to_string()]
        .into_iter()
        .chain((0..x.ncols()).map(|j| x_names.get(j).cloned().unwrap_or_else(|| format!("x{j}"))))
        .collect();
    let a = DMatrix::from_fn(n, k, |i, j| match j {
        0 => 1.0,
        1 => t[i],
        _ => x[[i, j - 2]],
    });
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| a.column(j).norm()).fold(0.0, f64::max).max(1e-300);
    let collinear: Vec<String> = (0..k)
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * scale)
        .map(|j| names[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| degenerate!("singular triangular factor"))?;
    let resid = &yv - &a * &beta;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| degenerate!("singular triangular factor"))?;
    let bread = &r_inv * r_inv.transpose();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = a.row(i);
        meat += row.transpose() * row * (resid[i] * resid[i]);
    }
    let cov = &bread * meat * &bread * (n as f64 / (n - k) as f64);
    let theta = beta[1];
    let se = cov[(1, 1)].max(0.0).sqrt();
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        residuals: resid.iter().copied().collect(),
        estimate: DmlEstimate::from_theta_se(theta, se, "ols", n, 0),
    })
}

pub fn ols_baseline(y: &[f64], t: &[f64], x: ArrayView2<'_, f64>, x_names: &[String]) -> Result<DmlEstimate> {
    Ok(ols_fit(y, t, x, x_names)?.estimate)
}
