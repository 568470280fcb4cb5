//! `run_manifest.json`: config hash, seed, versions, stage timings, artifact
//! digests and the failure point, if any.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunConfig, Stage, MANIFEST};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// `ok` or `failed`.
    pub status: String,
    pub seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// In pipeline order; a re-run stage replaces its earlier record.
    pub stages: Vec<StageRecord>,
    pub failure: Option<FailureRecord>,
}

/// SHA-256 of the canonical JSON form of the effective config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("causalgrid".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        (
            "forest_format".to_string(),
            crate::causal_forest::FOREST_FORMAT_VERSION.to_string(),
        ),
    ])
}

impl Manifest {
    /// The manifest already in `out` when it belongs to the same config and
    /// seed, else a fresh one.
    pub fn open(cfg: &RunConfig, out: &Path) -> Result<Self> {
        let hash = config_hash(cfg);
        let path = out.join(MANIFEST);
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            match serde_json::from_str::<Manifest>(&text) {
                Ok(m) if m.config_hash == hash && m.seed == cfg.seed => return Ok(m),
                Ok(_) => log::info!("config changed; starting a new manifest"),
                Err(e) => log::warn!("ignoring unreadable manifest: {e}"),
            }
        }
        Ok(Self {
            config_hash: hash,
            seed: cfg.seed,
            versions: versions(),
            stages: Vec::new(),
            failure: None,
        })
    }

    fn put(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        self.stages.push(rec);
        self.stages
            .sort_by_key(|s| s.stage.parse::<Stage>().map_or(usize::MAX, |st| st as usize));
    }

    pub fn record_success(&mut self, stage: Stage, seconds: f64, out: &Path, files: &[String]) {
        let artifacts = files
            .iter()
            .map(|f| ArtifactRecord {
                path: f.clone(),
                sha256: file_sha256(&out.join(f)).unwrap_or_default(),
            })
            .collect();
        self.put(StageRecord {
            stage: stage.to_string(),
            status: "ok".into(),
            seconds,
            artifacts,
        });
        if self.failure.as_ref().is_some_and(|f| f.stage == stage.as_str()) {
            self.failure = None;
        }
    }

    pub fn record_failure(&mut self, stage: Stage, seconds: f64, err: &Error) {
        self.put(StageRecord {
            stage: stage.to_string(),
            status: "failed".into(),
            seconds,
            artifacts: Vec::new(),
        });
        self.failure = Some(FailureRecord {
            stage: stage.to_string(),
            error: err.to_string(),
        });
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every artifact path recorded by a successful stage.
    pub fn artifacts(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| s.status == "ok")
            .flat_map(|s| s.artifacts.iter().map(|a| a.path.as_str()))
            .collect()
    }
}
