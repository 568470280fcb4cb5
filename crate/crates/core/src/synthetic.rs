//! Data generating processes with known effects, and Monte Carlo scoring of
//! estimators against them.
//!
//! `X ~ N(0, I_p)`, `T = m(X) + σ_v·v`, `Y = τ(X)·T + g(X) + σ_ε·ε`, with
//! `v, ε ~ N(0, 1)`. Feature `x1` is column 0.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal_forest::{run_forest, ForestParams};
use crate::dml::{make_folds, ols_baseline, plr_theta, crossfit_residuals, repeat_estimate, DmlEstimate};
use crate::error::{invalid, Error, Result};
use crate::learners::LearnerSpec;
use crate::rng;
use crate::stats;
use crate::table::DataTable;

pub const MIN_N: usize = 50;
pub const MIN_REPLICATIONS: usize = 10;
/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeForm {
    /// `Σ_j x_j / j`.
    Linear,
    /// `2·sin(x1) + 2·x2·x3`.
    SineInteraction,
    /// `2·1{x1 > 0} + 1{x2 > 0.5}`.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentForm {
    /// `Σ_j x_j / (2j)`.
    Linear,
    /// `2·σ(2·(x1 + x2·x3)) − 1`, σ the logistic function.
    Logistic,
    /// `0`: treatment independent of the covariates.
    Randomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    Constant { theta: f64 },
    /// `τ(x) = a + b·x1`.
    Linear { a: f64, b: f64 },
}

impl Effect {
    pub fn at(&self, x: &[f64]) -> f64 {
        match *self {
            Effect::Constant { theta } => theta,
            Effect::Linear { a, b } => a + b * x[0],
        }
    }

    /// Population average effect under standard normal covariates.
    pub fn average(&self) -> f64 {
        match *self {
            Effect::Constant { theta } => theta,
            Effect::Linear { a, .. } => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    pub effect: Effect,
    pub g: OutcomeForm,
    pub m: TreatmentForm,
    pub sigma_eps: f64,
    pub sigma_v: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn plr(n: usize, theta: f64, g: OutcomeForm, m: TreatmentForm, seed: u64) -> Self {
        Self {
            n,
            p: 5,
            effect: Effect::Constant { theta },
            g,
            m,
            sigma_eps: 1.0,
            sigma_v: 1.0,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(invalid!("n must be at least {MIN_N}, got {}", self.n));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_v >= 0.0) {
            return Err(invalid!("noise standard deviations must be nonnegative"));
        }
        let need = match (self.g, self.m) {
            (OutcomeForm::SineInteraction, _) | (_, TreatmentForm::Logistic) => 3,
            (OutcomeForm::Step, _) => 2,
            _ => 1,
        };
        if self.p < need {
            return Err(invalid!("these forms need p >= {need}, got {}", self.p));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let g = serde_json::to_value(self.g).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let m = serde_json::to_value(self.m).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        format!("g={g};m={m};n={}", self.n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn outcome_nuisance(form: OutcomeForm, x: &[f64]) -> f64 {
    match form {
        OutcomeForm::Linear => x.iter().enumerate().map(|(j, v)| v / (j + 1) as f64).sum(),
        OutcomeForm::SineInteraction => 2.0 * x[0].sin() + 2.0 * x[1] * x[2],
        OutcomeForm::Step => 2.0 * f64::from(u8::from(x[0] > 0.0)) + f64::from(u8::from(x[1] > 0.5)),
    }
}

pub fn treatment_nuisance(form: TreatmentForm, x: &[f64]) -> f64 {
    match form {
        TreatmentForm::Linear => x.iter().enumerate().map(|(j, v)| v / (2 * (j + 1)) as f64).sum(),
        TreatmentForm::Logistic => 2.0 * logistic(2.0 * (x[0] + x[1] * x[2])) - 1.0,
        TreatmentForm::Randomized => 0.0,
    }
}

/// A generated sample with its per-row truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: DgpSpec,
    pub x: Array2<f64>,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub tau: Vec<f64>,
}

impl SyntheticData {
    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.spec.p).map(|j| format!("x{j}")).collect()
    }

    /// Columns `x1..xp`, `t`, `y`, `tau_true`; ids are row numbers.
    pub fn to_table(&self) -> DataTable {
        let mut tab = DataTable::new((0..self.spec.n as u64).collect());
        for (j, name) in self.feature_names().into_iter().enumerate() {
            tab.push(name, self.x.column(j).to_vec()).expect("fresh names, matching length");
        }
        tab.push("t", self.t.clone()).expect("fresh name");
        tab.push("y", self.y.clone()).expect("fresh name");
        tab.push("tau_true", self.tau.clone()).expect("fresh name");
        tab
    }
}

/// Draw a sample. Draw order (X row-major, then v, then ε per row) does not
/// depend on the effect form.
pub fn generate(spec: &DgpSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut r = rng::rng(spec.seed);
    let (n, p) = (spec.n, spec.p);
    let x = Array2::from_shape_fn((n, p), |_| r.sample::<f64, _>(StandardNormal));
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i).to_vec();
        let v: f64 = r.sample(StandardNormal);
        let e: f64 = r.sample(StandardNormal);
        let ti = treatment_nuisance(spec.m, &row) + spec.sigma_v * v;
        let tau_i = spec.effect.at(&row);
        t.push(ti);
        y.push(tau_i * ti + outcome_nuisance(spec.g, &row) + spec.sigma_eps * e);
        tau.push(tau_i);
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        x,
        t,
        y,
        tau,
    })
}

/// Constant-effect partially linear sample.
pub fn gen_plr(spec: &DgpSpec) -> Result<SyntheticData> {
    match spec.effect {
        Effect::Constant { .. } => generate(spec),
        Effect::Linear { .. } => Err(invalid!("gen_plr needs a constant effect")),
    }
}

/// Sample with `τ(x) = a + b·x1`.
pub fn gen_hetero(spec: &DgpSpec) -> Result<SyntheticData> {
    match spec.effect {
        Effect::Linear { .. } => generate(spec),
        Effect::Constant { .. } => Err(invalid!("gen_hetero needs a linear effect")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Estimator {
    /// Cross-fitted DML, averaged over `reps` fold splits.
    Dml { learner: LearnerSpec, k: usize, reps: usize },
    /// OLS of Y on T and linear X.
    OlsControls,
    /// OLS of Y on T alone.
    OlsNaive,
    CausalForest {
        params: ForestParams,
        centering: LearnerSpec,
        k: usize,
    },
}

impl Estimator {
    pub fn id(&self) -> &'static str {
        match self {
            Estimator::Dml { .. } => "dml",
            Estimator::OlsControls => "ols_controls",
            Estimator::OlsNaive => "ols_naive",
            Estimator::CausalForest { .. } => "cforest",
        }
    }

    /// Estimate on one sample; `seed` drives every random choice.
    pub fn estimate(&self, data: &SyntheticData, seed: u64) -> Result<DmlEstimate> {
        let x = data.x.view();
        match self {
            Estimator::Dml { learner, k, reps } => {
                let spec = learner.with_seed(rng::derive(seed, 1));
                if *reps == 1 {
                    let plan = make_folds(data.spec.n, *k, rng::derive(seed, 0))?;
                    let res = crossfit_residuals(&spec, x, &data.y, &data.t, &plan)?;
                    plr_theta(&res)
                } else {
                    repeat_estimate(&spec, x, &data.y, &data.t, *k, *reps, seed)
                }
            }
            Estimator::OlsControls => ols_baseline(&data.y, &data.t, x, &data.feature_names()),
            Estimator::OlsNaive => {
                let empty = Array2::<f64>::zeros((data.spec.n, 0));
                ols_baseline(&data.y, &data.t, empty.view(), &[])
            }
            Estimator::CausalForest { params, centering, k } => {
                let p = ForestParams {
                    seed,
                    ..params.clone()
                };
                Ok(run_forest(x, &data.y, &data.t, &p, centering, *k)?.ate)
            }
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    /// Parameter-free estimators only; the others are configured in full.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols_controls" => Ok(Estimator::OlsControls),
            "ols_naive" => Ok(Estimator::OlsNaive),
            other => Err(invalid!("estimator `{other}` needs a full configuration")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorScore {
    pub estimator: String,
    pub dgp: String,
    pub truth: f64,
    pub reps: usize,
    pub failures: usize,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
}

/// Score any `(sample, seed) -> estimate` procedure over `reps` samples.
/// Replication `r` draws data with seed `derive(spec.seed, r)` and hands the
/// estimator a seed derived from that.
pub fn score_with<F>(label: &str, spec: &DgpSpec, reps: usize, estimate: F) -> Result<EstimatorScore>
where
    F: Fn(&SyntheticData, u64) -> Result<DmlEstimate> + Sync,
{
    if reps < MIN_REPLICATIONS {
        return Err(invalid!("need at least {MIN_REPLICATIONS} replications, got {reps}"));
    }
    spec.validate()?;
    let outcomes: Vec<Result<(DmlEstimate, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let data_seed = rng::derive(spec.seed, r as u64);
            let data = generate(&spec.with_seed(data_seed))?;
            let truth = data.spec.effect.average();
            estimate(&data, rng::derive(data_seed, 1)).map(|e| (e, truth))
        })
        .collect();
    let mut ok = Vec::with_capacity(reps);
    let mut failures = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("{label}: replication {r} failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > MAX_FAILURE_SHARE * reps as f64 {
        return Err(Error::Degenerate(format!("{label}: {failures} of {reps} replications failed")));
    }
    let truth = spec.effect.average();
    let errs: Vec<f64> = ok.iter().map(|(e, t)| e.theta - t).collect();
    let covered = ok.iter().filter(|(e, t)| e.covers(*t)).count();
    let widths: Vec<f64> = ok.iter().map(|(e, _)| e.ci_high - e.ci_low).collect();
    Ok(EstimatorScore {
        estimator: label.to_string(),
        dgp: spec.label(),
        truth,
        reps,
        failures,
        bias: stats::mean(&errs),
        rmse: (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt(),
        coverage: covered as f64 / ok.len() as f64,
        mean_ci_width: stats::mean(&widths),
    })
}

pub fn score_estimator(estimator: &Estimator, spec: &DgpSpec, reps: usize) -> Result<EstimatorScore> {
    score_with(estimator.id(), spec, reps, |d, s| estimator.estimate(d, s))
}

pub fn write_scores_csv(path: &Path, scores: &[EstimatorScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "estimator", "dgp", "truth", "reps", "failures", "bias", "rmse", "coverage", "mean_ci_width",
    ])?;
    for s in scores {
        w.write_record([
            s.estimator.clone(),
            s.dgp.clone(),
            s.truth.to_string(),
            s.reps.to_string(),
            s.failures.to_string(),
            s.bias.to_string(),
            s.rmse.to_string(),
            s.coverage.to_string(),
            s.mean_ci_width.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
