//! Staged batch driver.
//!
//! Stages exchange data only through files in the output directory, so each
//! can run alone once its prerequisites exist. Every invocation updates
//! `run_manifest.json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{invalid, Error, Result};

pub mod artifacts;
pub mod config;
pub mod manifest;
pub mod report;
mod stages;
pub mod toy;

pub use config::RunConfig;
pub use manifest::Manifest;

pub const GRID_GEOJSON: &str = "grid.geojson";
pub const GRID_TABLE: &str = "grid_table.csv";
pub const SCREEN_REPORT: &str = "screen_report.csv";
pub const ANALYSIS_TABLE: &str = "analysis_table.csv";
pub const ANALYSIS_META: &str = "standardization.json";
pub const ESTIMATES: &str = "estimates.json";
pub const SHAP_IMPORTANCE: &str = "shap_importance.csv";
pub const SHAP_INTERACTIONS: &str = "shap_interactions.csv";
pub const CATE_CSV: &str = "cate.csv";
pub const CFOREST_SUMMARY: &str = "cforest_summary.json";
pub const CFOREST_MODEL: &str = "cforest_model.json";
pub const SEMI_ELASTICITY: &str = "semi_elasticity.csv";
pub const CATE_MAP: &str = "cate_map.geojson";
pub const SCORES: &str = "scores.csv";
pub const REPORT: &str = "report.txt";
pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GridBuild,
    Screen,
    Dml,
    Shap,
    Cforest,
    Hetero,
    Simulate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GridBuild,
        Stage::Screen,
        Stage::Dml,
        Stage::Shap,
        Stage::Cforest,
        Stage::Hetero,
        Stage::Simulate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GridBuild => "grid-build",
            Stage::Screen => "screen",
            Stage::Dml => "dml",
            Stage::Shap => "shap",
            Stage::Cforest => "cforest",
            Stage::Hetero => "hetero",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    /// Files this stage reads, each with the stage that writes it.
    pub fn prerequisites(self) -> &'static [(&'static str, Stage)] {
        const ANALYSIS: [(&str, Stage); 2] = [(ANALYSIS_TABLE, Stage::Screen), (ANALYSIS_META, Stage::Screen)];
        match self {
            Stage::GridBuild | Stage::Simulate => &[],
            Stage::Screen => &[(GRID_TABLE, Stage::GridBuild)],
            Stage::Dml | Stage::Shap | Stage::Cforest => &ANALYSIS,
            Stage::Hetero => &[
                (ANALYSIS_TABLE, Stage::Screen),
                (ANALYSIS_META, Stage::Screen),
                (GRID_TABLE, Stage::GridBuild),
                (GRID_GEOJSON, Stage::GridBuild),
                (CATE_CSV, Stage::Cforest),
                (CFOREST_SUMMARY, Stage::Cforest),
            ],
            Stage::Report => &[(ESTIMATES, Stage::Dml)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid!("unknown stage `{s}`"))
    }
}

/// Why a run stopped. Validation failures happen before any stage computes.
#[derive(Debug)]
pub enum Failure {
    Validation(Error),
    Stage { stage: Stage, source: Error },
}

impl Failure {
    /// Process exit status: 2 for validation, 3 for a failed stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Stage { .. } => 3,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Validation(e) | Failure::Stage { source: e, .. } => e,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "validation failed: {e}"),
            Failure::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source}"),
        }
    }
}

impl std::error::Error for Failure {}

/// Stages executed by `run`: all of them, `simulate` only when configured.
pub fn full_run(cfg: &RunConfig) -> Vec<Stage> {
    Stage::ALL
        .into_iter()
        .filter(|&s| s != Stage::Simulate || cfg.simulate.is_some())
        .collect()
}

/// Inputs a stage needs from the config itself.
fn validate_for(cfg: &RunConfig, stage: Stage) -> Result<()> {
    match stage {
        Stage::GridBuild => {
            if cfg.grid.is_none() {
                return Err(invalid!("grid-build needs a `grid` section"));
            }
            let i = &cfg.inputs;
            if i.grid_table.is_none() && i.crashes.is_none() {
                return Err(invalid!("grid-build needs `inputs.crashes` or `inputs.grid_table`"));
            }
        }
        Stage::Screen | Stage::Dml | Stage::Shap | Stage::Cforest | Stage::Hetero => {
            cfg.primary_treatment()?;
        }
        Stage::Simulate => {
            if cfg.simulate.is_none() {
                return Err(invalid!("simulate needs a `simulate` section"));
            }
        }
        Stage::Report => {}
    }
    Ok(())
}

/// Validation done before anything is computed: the config, every
/// configured input path, and prerequisites not produced by an earlier stage
/// of this invocation.
pub fn validate(cfg: &RunConfig, out: &Path, stages: &[Stage]) -> Result<()> {
    cfg.validate()?;
    let i = &cfg.inputs;
    for p in [&i.crashes, &i.tracts, &i.images, &i.mask, &i.grid_table].into_iter().flatten() {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
    }
    for &stage in stages {
        validate_for(cfg, stage)?;
        for &(file, producer) in stage.prerequisites() {
            let produced_here = stages.iter().any(|&s| s == producer && s < stage);
            if !produced_here && !out.join(file).is_file() {
                return Err(Error::MissingPrerequisite {
                    stage: producer.to_string(),
                    path: out.join(file),
                });
            }
        }
    }
    Ok(())
}

/// Runs `stages` in order with artifacts under `out`. The manifest is
/// written on success and on failure; artifacts of completed stages remain.
pub fn execute(cfg: &RunConfig, out: &Path, stages: &[Stage]) -> std::result::Result<Manifest, Failure> {
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    validate(cfg, out, &stages).map_err(Failure::Validation)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Validation(Error::io(out, e)))?;
    let mut manifest = Manifest::open(cfg, out).map_err(Failure::Validation)?;
    for &stage in &stages {
        let start = Instant::now();
        log::info!("stage {stage}: start");
        let ctx = stages::Ctx { cfg, out };
        let result = ctx.run(stage);
        let seconds = start.elapsed().as_secs_f64();
        match result {
            Ok(files) => {
                log::info!("stage {stage}: done in {seconds:.2}s");
                manifest.record_success(stage, seconds, out, &files);
            }
            Err(e) => {
                log::error!("stage {stage}: {e}");
                manifest.record_failure(stage, seconds, &e);
                // the stage error is what the caller needs; a manifest write
                // failure is only logged
                if let Err(w) = manifest.write(out) {
                    log::error!("could not write manifest: {w}");
                }
                return Err(Failure::Stage { stage, source: e });
            }
        }
    }
    manifest
        .write(out)
        .map_err(|e| Failure::Stage {
            stage: *stages.last().unwrap_or(&Stage::Report),
            source: e,
        })?;
    Ok(manifest)
}

/// Resolved output directory: the override when given, else the config's.
pub fn output_dir(cfg: &RunConfig, override_dir: Option<&Path>) -> PathBuf {
    override_dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
}
