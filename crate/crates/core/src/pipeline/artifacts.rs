//! Schemas of the JSON artifacts and readers for the CSV ones that later
//! stages consume.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::causal_forest::{CateEstimate, ForestParams};
use crate::dml::{DmlEstimate, RobustnessMatrix};
use crate::error::{invalid, Error, Result};
use crate::heterogeneity::SemiElasticityRow;
use crate::learners::{LearnerKind, LearnerSpec};
use crate::screening::{FeatureTable, Standardization};
use crate::table::DataTable;

/// Column roles of `analysis_table.csv` and the z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMeta {
    pub outcome: String,
    pub treatments: Vec<String>,
    pub covariates: Vec<String>,
    /// Raw subtype outcome columns carried alongside.
    pub subtypes: Vec<String>,
    pub n_rows: usize,
    pub dropped_rows: usize,
    pub scaling: Standardization,
}

impl AnalysisMeta {
    pub fn feature_table(&self, table: DataTable) -> Result<FeatureTable> {
        for name in std::iter::once(&self.outcome)
            .chain(&self.treatments)
            .chain(&self.covariates)
            .chain(&self.subtypes)
        {
            table.require(name)?;
        }
        if table.n_rows() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                got: table.n_rows(),
            });
        }
        Ok(FeatureTable {
            table,
            outcome: self.outcome.clone(),
            treatments: self.treatments.clone(),
            covariates: self.covariates.clone(),
            scaling: self.scaling.clone(),
            dropped_rows: self.dropped_rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsRow {
    pub treatment: String,
    pub estimate: Option<DmlEstimate>,
    pub error: Option<String>,
}

/// `estimates.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub outcome: String,
    pub n: usize,
    pub k: usize,
    pub reps: usize,
    pub seed: u64,
    pub rotate_treatments: bool,
    pub primary_treatment: String,
    pub primary_learner: LearnerKind,
    pub screen: RobustnessMatrix,
    pub ols: Vec<OlsRow>,
}

impl Estimates {
    /// The primary (treatment, learner) cell.
    pub fn primary(&self) -> Option<&DmlEstimate> {
        self.screen
            .cell(&self.primary_treatment, self.primary_learner.as_str())
            .and_then(|c| c.estimate.as_ref())
    }

    pub fn ols_for(&self, treatment: &str) -> Option<&DmlEstimate> {
        self.ols
            .iter()
            .find(|o| o.treatment == treatment)
            .and_then(|o| o.estimate.as_ref())
    }
}

/// `cforest_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSummary {
    pub outcome: String,
    pub treatment: String,
    pub n: usize,
    pub n_defined: usize,
    pub n_clamped: usize,
    pub ate: DmlEstimate,
    /// Parameters as run, seed included.
    pub params: ForestParams,
    pub centering: LearnerSpec,
    pub k: usize,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid!("{}: {e}", path.display()))
}

fn field(s: &str) -> Result<f64> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse().map_err(|_| invalid!("`{s}` is not a number"))
    }
}

fn flag(s: &str) -> Result<bool> {
    s.parse().map_err(|_| invalid!("`{s}` is not a boolean"))
}

fn header_check(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(invalid!("{}: expected columns {}", path.display(), want.join(",")));
    }
    Ok(())
}

/// Reads `cate.csv` back; `clamped` is not stored and reads as `false`.
pub fn read_cate_csv(path: &Path, n_trees: usize) -> Result<(Vec<u64>, Vec<CateEstimate>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    header_check(path, rdr.headers()?, &["cell_id", "tau", "variance", "ci_low", "ci_high", "defined"])?;
    let mut ids = Vec::new();
    let mut cates = Vec::new();
    for rec in rdr.records() {
        let r = rec?;
        ids.push(r[0].parse().map_err(|_| invalid!("bad cell id `{}`", &r[0]))?);
        cates.push(CateEstimate {
            tau: field(&r[1])?,
            variance: field(&r[2])?,
            ci_low: field(&r[3])?,
            ci_high: field(&r[4])?,
            defined: flag(&r[5])?,
            clamped: false,
            n_trees,
        });
    }
    Ok((ids, cates))
}

pub fn read_semi_elasticity_csv(path: &Path) -> Result<Vec<SemiElasticityRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    header_check(
        path,
        rdr.headers()?,
        &["outcome", "ate", "se", "ci_low", "ci_high", "p_value", "y_mean", "y_q1", "treatment_q1_cut", "delta_pct"],
    )?;
    rdr.records()
        .map(|rec| {
            let r = rec?;
            Ok(SemiElasticityRow {
                outcome: r[0].to_string(),
                ate: field(&r[1])?,
                se: field(&r[2])?,
                ci_low: field(&r[3])?,
                ci_high: field(&r[4])?,
                p_value: field(&r[5])?,
                y_mean: field(&r[6])?,
                y_q1: field(&r[7])?,
                treatment_q1_cut: field(&r[8])?,
                delta_pct: match &r[9] {
                    "" => None,
                    s => Some(s.parse().map_err(|_| invalid!("bad delta `{s}`"))?),
                },
            })
        })
        .collect()
}

/// Stored scores, one row per estimator, keyed by column name.
pub fn read_scores_csv(path: &Path) -> Result<Vec<Vec<(String, String)>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    rdr.records()
        .map(|rec| {
            let r = rec?;
            Ok(header.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}
