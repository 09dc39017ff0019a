//! Run directory bookkeeping: atomic file writes and the append-only run
//! manifest that records configuration, per-stage outcomes, and artifact
//! references.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Write-then-rename so readers never observe a partial file and reruns
/// overwrite atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Outcome of one pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub epochs: usize,
    pub wall_clock_secs: f64,
    /// Paths relative to the run directory; must exist when the manifest is
    /// written.
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_test_accuracy: Option<f64>,
    /// Fraction of (instance, view) pairs judged clean (division stage).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_fraction: Option<f64>,
    /// `[instances, views, epochs]` of the recorded loss trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalEval {
    pub test_accuracy: f64,
    /// Fusion rule used for the final evaluation.
    pub fusion: String,
    /// The checkpoint (relative to the run directory) the evaluation used.
    pub checkpoint: String,
}

/// Reproducibility record of one training run. Stages append as they
/// finish; a failed run is flagged incomplete with the error preserved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_eval: Option<FinalEval>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(config: RunConfig, dataset_fingerprint: String) -> Self {
        RunManifest {
            format_version: MANIFEST_VERSION,
            seed: config.seed,
            dataset_fingerprint,
            config,
            stages: Vec::new(),
            final_eval: None,
            complete: false,
            error: None,
        }
    }

    /// Append a stage record and rewrite the manifest, first checking every
    /// referenced artifact exists under `run_dir`.
    pub fn push_stage(&mut self, run_dir: &Path, stage: StageRecord) -> Result<()> {
        for artifact in &stage.artifacts {
            let path = run_dir.join(artifact);
            if !path.exists() {
                return Err(Error::invalid(format!(
                    "stage '{}' references missing artifact {artifact}",
                    stage.name
                )));
            }
        }
        self.stages.push(stage);
        self.save(run_dir)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("manifest encode: {e}")))?;
        write_atomic(&run_dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("manifest decode {}: {e}", path.display())))
    }

    /// Check that every artifact referenced by any stage still resolves.
    pub fn validate_artifacts(&self, run_dir: &Path) -> Result<()> {
        for stage in &self.stages {
            for artifact in &stage.artifacts {
                if !run_dir.join(artifact).exists() {
                    return Err(Error::invalid(format!(
                        "manifest references missing artifact {artifact}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert!(!dir.path().join(".file.txt.tmp").exists());
    }

    #[test]
    fn manifest_round_trip_and_artifact_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::new(RunConfig::default(), "sha256:abc".into());
        std::fs::write(dir.path().join("log.csv"), "epoch\n").unwrap();
        manifest
            .push_stage(
                dir.path(),
                StageRecord {
                    name: "stage1".into(),
                    epochs: 3,
                    wall_clock_secs: 0.5,
                    artifacts: vec!["log.csv".into()],
                    final_train_loss: Some(1.25),
                    final_test_accuracy: Some(0.5),
                    clean_fraction: None,
                    trace_shape: None,
                },
            )
            .unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.stages.len(), 1);
        assert_eq!(loaded.stages[0].name, "stage1");
        loaded.validate_artifacts(dir.path()).unwrap();

        std::fs::remove_file(dir.path().join("log.csv")).unwrap();
        assert!(loaded.validate_artifacts(dir.path()).is_err());
    }

    #[test]
    fn missing_artifact_rejected_at_push_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::new(RunConfig::default(), "sha256:abc".into());
        let err = manifest.push_stage(
            dir.path(),
            StageRecord {
                name: "stage1".into(),
                epochs: 0,
                wall_clock_secs: 0.0,
                artifacts: vec!["missing.csv".into()],
                final_train_loss: None,
                final_test_accuracy: None,
                clean_fraction: None,
                trace_shape: None,
            },
        );
        assert!(err.is_err());
    }
}
