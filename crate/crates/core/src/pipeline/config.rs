//! Run configuration: one JSON document per run.
//!
//! Relative input paths resolve against the directory holding the config
//! file. The output directory resolves against the working directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causal_forest::ForestParams;
use crate::dml::{DEFAULT_ALPHA, DEFAULT_FOLDS, DEFAULT_REPS};
use crate::error::{invalid, Error, Result};
use crate::learners::{LearnerKind, LearnerSpec};
use crate::screening::{DEFAULT_K_CORR, DEFAULT_K_FINAL};
use crate::shap::{lowess, DEFAULT_INTERACTION_SAMPLE};
use crate::synthetic::{DgpSpec, Estimator, MIN_REPLICATIONS};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    /// The first entry is the primary treatment.
    #[serde(default)]
    pub treatments: Vec<String>,
    /// Candidate covariates; by default every grid column that is not the
    /// outcome, a crash subtype count or a treatment.
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
    #[serde(default)]
    pub screening: ScreeningConfig,
    #[serde(default = "default_learners")]
    pub learners: Vec<LearnerEntry>,
    #[serde(default)]
    pub dml: DmlConfig,
    #[serde(default)]
    pub shap: ShapConfig,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub heterogeneity: HeteroConfig,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub crashes: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Prebuilt grid table keyed by `cell_id`; replaces the three raw inputs.
    pub grid_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// `[min_x, min_y, max_x, max_y]` in projected meters.
    pub extent: [f64; 4],
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningConfig {
    pub k_corr: usize,
    pub k_final: usize,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            k_corr: DEFAULT_K_CORR,
            k_final: DEFAULT_K_FINAL,
        }
    }
}

/// A learner given either by kind alone (default hyperparameters) or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearnerEntry {
    Kind(LearnerKind),
    Spec(LearnerSpec),
}

impl LearnerEntry {
    pub fn kind(&self) -> LearnerKind {
        match self {
            LearnerEntry::Kind(k) => *k,
            LearnerEntry::Spec(s) => s.kind,
        }
    }

    pub fn spec(&self, seed: u64) -> LearnerSpec {
        match self {
            LearnerEntry::Kind(k) => LearnerSpec::new(*k, seed),
            LearnerEntry::Spec(s) => s.with_seed(seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmlConfig {
    pub k: usize,
    pub reps: usize,
    pub alpha: f64,
    /// Other treatments join the controls while one is estimated.
    pub rotate_treatments: bool,
    /// Learner whose estimate is reported as the DML row.
    pub primary_learner: LearnerKind,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_FOLDS,
            reps: DEFAULT_REPS,
            alpha: DEFAULT_ALPHA,
            rotate_treatments: true,
            primary_learner: LearnerKind::GbtDepthwise,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapConfig {
    /// Defaults to the primary DML learner.
    pub learner: Option<LearnerEntry>,
    pub interaction_samples: usize,
    pub lowess_frac: f64,
    pub lowess_iters: usize,
    /// Dependence curves for this many top features of the outcome model.
    pub dependence_features: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            learner: None,
            interaction_samples: DEFAULT_INTERACTION_SAMPLE,
            lowess_frac: lowess::DEFAULT_FRAC,
            lowess_iters: lowess::DEFAULT_ITERS,
            dependence_features: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    /// Seed field is ignored; the stage derives its own.
    pub params: ForestParams,
    /// Defaults to bagged trees.
    pub centering: Option<LearnerEntry>,
    pub k: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            params: ForestParams::default(),
            centering: None,
            k: DEFAULT_FOLDS,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeteroConfig {
    /// Grid columns whose quartiles stratify the CATEs.
    pub subgroup_covariates: Vec<String>,
    /// Outcome columns that each get their own forest.
    pub subtypes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Its seed field is replaced by one derived from the master seed.
    pub dgp: DgpSpec,
    pub reps: usize,
    pub estimators: Vec<Estimator>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_outcome() -> String {
    crate::data_pipeline::io::OUTCOME_COLUMN.to_string()
}

fn default_cell_size() -> f64 {
    crate::data_pipeline::grid::DEFAULT_CELL_SIZE
}

fn default_learners() -> Vec<LearnerEntry> {
    LearnerKind::ALL.iter().map(|&k| LearnerEntry::Kind(k)).collect()
}

impl RunConfig {
    /// Parses the file and resolves relative input paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| invalid!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.input_paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn input_paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        let i = &mut self.inputs;
        [&mut i.crashes, &mut i.tracts, &mut i.images, &mut i.mask, &mut i.grid_table]
            .into_iter()
            .flatten()
    }

    pub fn primary_treatment(&self) -> Result<&str> {
        self.treatments
            .first()
            .map(String::as_str)
            .ok_or_else(|| invalid!("no treatment configured"))
    }

    pub fn centering_entry(&self) -> LearnerEntry {
        self.forest
            .centering
            .clone()
            .unwrap_or(LearnerEntry::Kind(LearnerKind::BaggedTrees))
    }

    pub fn shap_entry(&self) -> LearnerEntry {
        self.shap.learner.clone().unwrap_or_else(|| self.primary_entry())
    }

    /// Configured learner of the primary kind, or its defaults.
    pub fn primary_entry(&self) -> LearnerEntry {
        let kind = self.dml.primary_learner;
        self.learners
            .iter()
            .find(|l| l.kind() == kind)
            .cloned()
            .unwrap_or(LearnerEntry::Kind(kind))
    }

    /// Checks that hold regardless of which stages run.
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.grid {
            let [x0, y0, x1, y1] = g.extent;
            if !(x1 > x0 && y1 > y0) || g.extent.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("grid extent {:?} is degenerate", g.extent));
            }
            if !(g.cell_size > 0.0 && g.cell_size.is_finite()) {
                return Err(invalid!("cell size must be positive, got {}", g.cell_size));
            }
        }
        let s = &self.screening;
        if s.k_final == 0 || s.k_final > s.k_corr {
            return Err(invalid!("screening needs 1 <= k_final <= k_corr, got {} and {}", s.k_final, s.k_corr));
        }
        if self.learners.is_empty() {
            return Err(invalid!("at least one learner is required"));
        }
        let mut kinds: Vec<LearnerKind> = self.learners.iter().map(LearnerEntry::kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.learners.len() {
            return Err(invalid!("each learner kind may appear once"));
        }
        let d = &self.dml;
        if d.k < 2 || d.reps == 0 {
            return Err(invalid!("dml needs k >= 2 and reps >= 1"));
        }
        if !(d.alpha > 0.0 && d.alpha < 1.0) {
            return Err(invalid!("alpha must lie in (0, 1), got {}", d.alpha));
        }
        let sh = &self.shap;
        if !(sh.lowess_frac > 0.0 && sh.lowess_frac <= 1.0) || sh.interaction_samples == 0 {
            return Err(invalid!("shap needs lowess_frac in (0, 1] and interaction_samples >= 1"));
        }
        self.forest.params.validate()?;
        if self.forest.k < 2 {
            return Err(invalid!("forest centering needs k >= 2"));
        }
        let mut names = self.treatments.clone();
        names.sort();
        names.dedup();
        if names.len() != self.treatments.len() {
            return Err(invalid!("duplicate treatment names"));
        }
        if self.treatments.contains(&self.outcome) {
            return Err(invalid!("outcome `{}` is also listed as a treatment", self.outcome));
        }
        if let Some(sim) = &self.simulate {
            sim.dgp.validate()?;
            if sim.reps < MIN_REPLICATIONS {
                return Err(invalid!("simulate needs at least {MIN_REPLICATIONS} replications"));
            }
            if sim.estimators.is_empty() {
                return Err(invalid!("simulate needs at least one estimator"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        serde_json::from_str(s).map_err(|e| invalid!("{e}"))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse(r#"{"seed": 3, "treatments": ["seg_08"]}"#).unwrap();
        assert_eq!(c.outcome, "crashes");
        assert_eq!(c.learners.len(), 4);
        assert_eq!((c.screening.k_corr, c.screening.k_final), (17, 10));
        assert_eq!((c.dml.k, c.dml.reps), (5, 10));
        assert_eq!(c.centering_entry().kind(), LearnerKind::BaggedTrees);
        assert_eq!(c.primary_entry().kind(), LearnerKind::GbtDepthwise);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_missing_seed_rejected() {
        assert!(parse(r#"{"seed": 1, "sead": 2}"#).is_err());
        assert!(parse(r#"{"treatments": []}"#).is_err());
    }

    #[test]
    fn semantic_checks() {
        for bad in [
            r#"{"seed": 1, "treatments": ["a", "a"]}"#,
            r#"{"seed": 1, "treatments": ["crashes"]}"#,
            r#"{"seed": 1, "screening": {"k_corr": 3, "k_final": 5}}"#,
            r#"{"seed": 1, "dml": {"alpha": 1.5}}"#,
            r#"{"seed": 1, "learners": ["extra_trees", "extra_trees"]}"#,
            r#"{"seed": 1, "grid": {"extent": [0, 0, 0, 10]}}"#,
        ] {
            assert!(parse(bad).unwrap().validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_inputs_resolve_against_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 1, "inputs": {"crashes": "c.csv", "tracts": "/abs/t.geojson"}}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.inputs.crashes.unwrap(), dir.path().join("c.csv"));
        assert_eq!(c.inputs.tracts.unwrap(), PathBuf::from("/abs/t.geojson"));
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }
}
