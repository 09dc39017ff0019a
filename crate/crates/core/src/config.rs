//! Run configuration: a TOML file drives every hyperparameter, each with a
//! documented default. CLI flags override file values, and the effective
//! configuration is echoed into the run directory for reproducibility.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::WeightTransform;
use crate::net::{Activation, OptimizerKind};
use crate::pipeline::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub stage4: Stage4Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            fusion: FusionConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            stage4: Stage4Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic generation parameters.
    pub views: usize,
    pub classes: usize,
    pub instances: usize,
    pub view_dims: Vec<usize>,
    pub separation: f64,
    /// Train fraction of the train/test split.
    pub split_ratio: f64,
    pub corruption: CorruptionConfig,
    pub csv: CsvConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            views: 3,
            classes: 4,
            instances: 1200,
            view_dims: vec![24, 24, 24],
            separation: 3.5,
            split_ratio: 0.8,
            corruption: CorruptionConfig::default(),
            csv: CsvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Misalignment rate applied independently to train and test splits.
    pub misalign_rate: f64,
    /// Views corrupted per misaligned instance; default `max(V - 2, 1)`.
    pub views_per_instance: Option<usize>,
    /// Gaussian noise rate, applied to the test split only.
    pub noise_rate: f64,
    pub noise_std: f64,
    pub noise_mean: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            misalign_rate: 0.4,
            views_per_instance: None,
            noise_rate: 0.10,
            noise_std: 0.5,
            noise_mean: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CsvConfig {
    pub view_paths: Vec<PathBuf>,
    /// Standalone label file with a `label` column.
    pub label_file: Option<PathBuf>,
    /// Alternatively, a label column inside view 1.
    pub label_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub norm_order: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![64],
            activation: Activation::Relu,
            norm_order: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub transform: WeightTransform,
    /// Freeze fusion weights in the backward pass (ablation switch).
    pub detach_weights: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            transform: WeightTransform::Exp,
            detach_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Defaults to the schedule's maximum learning rate.
    pub learning_rate: Option<f64>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 30,
            batch_size: 256,
            warmup_epochs: 10,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub batch_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config { batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub beta: f64,
    /// Fit one mixture over all views instead of one per view.
    pub pooled_gmm: bool,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            beta: 0.5,
            pooled_gmm: false,
            gmm_max_iters: 200,
            gmm_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage4Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub learning_rate: Option<f64>,
}

impl Default for Stage4Config {
    fn default() -> Self {
        Stage4Config {
            epochs: 100,
            batch_size: 64,
            warmup_epochs: 100,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub density_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { density_bins: 20 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.views < 2 {
                    return Err(Error::config("data.views must be >= 2"));
                }
                if d.classes < 2 {
                    return Err(Error::config("data.classes must be >= 2"));
                }
                if d.instances < 4 {
                    return Err(Error::config("data.instances must be >= 4"));
                }
                if d.view_dims.len() != d.views {
                    return Err(Error::config(format!(
                        "data.view_dims has {} entries for {} views",
                        d.view_dims.len(),
                        d.views
                    )));
                }
                if d.view_dims.iter().any(|&x| x == 0) {
                    return Err(Error::config("data.view_dims entries must be positive"));
                }
                if !(d.separation >= 0.0) {
                    return Err(Error::config("data.separation must be >= 0"));
                }
            }
            DataSource::Csv => {
                if d.csv.view_paths.is_empty() {
                    return Err(Error::config("data.csv.view_paths is required for csv source"));
                }
                match (&d.csv.label_file, &d.csv.label_column) {
                    (Some(_), Some(_)) => {
                        return Err(Error::config(
                            "set only one of data.csv.label_file and data.csv.label_column",
                        ))
                    }
                    (None, None) => {
                        return Err(Error::config(
                            "one of data.csv.label_file or data.csv.label_column is required",
                        ))
                    }
                    _ => {}
                }
            }
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::config("data.split_ratio must be in (0, 1)"));
        }
        let c = &d.corruption;
        if !(0.0..=1.0).contains(&c.misalign_rate) {
            return Err(Error::config("data.corruption.misalign_rate must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&c.noise_rate) {
            return Err(Error::config("data.corruption.noise_rate must be in [0, 1]"));
        }
        if !(c.noise_std >= 0.0) {
            return Err(Error::config("data.corruption.noise_std must be >= 0"));
        }

        if !self.model.norm_order.is_finite() || self.model.norm_order < 1.0 {
            return Err(Error::config("model.norm_order must be finite and >= 1"));
        }
        if self.model.hidden_dims.iter().any(|&x| x == 0) {
            return Err(Error::config("model.hidden_dims entries must be positive"));
        }

        self.schedule
            .validate()
            .map_err(|e| Error::config(format!("schedule: {e}")))?;

        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 || self.stage4.batch_size == 0
        {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.stage1.batch_size < self.stage2.batch_size {
            return Err(Error::config(
                "stage1.batch_size must be >= stage2.batch_size (pre-training uses the large batch)",
            ));
        }
        if self.stage1.warmup_epochs == 0 || self.stage4.warmup_epochs == 0 {
            return Err(Error::config("warmup_epochs must be >= 1"));
        }
        for (key, lr) in [
            ("stage1.learning_rate", self.stage1.learning_rate),
            ("stage4.learning_rate", self.stage4.learning_rate),
        ] {
            if let Some(lr) = lr {
                if !(lr > 0.0) {
                    return Err(Error::config(format!("{key} must be positive")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.stage3.beta) {
            return Err(Error::config("stage3.beta must be in [0, 1]"));
        }
        if self.stage3.gmm_max_iters == 0 {
            return Err(Error::config("stage3.gmm_max_iters must be positive"));
        }
        if !(self.stage3.gmm_tol > 0.0) {
            return Err(Error::config("stage3.gmm_tol must be positive"));
        }
        if self.eval.density_bins < 2 {
            return Err(Error::config("eval.density_bins must be >= 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_file_yields_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn partial_file_overrides_only_named_keys() {
        let cfg: RunConfig = toml::from_str(
            "seed = 7\n[schedule]\neta_max = 0.01\n[stage1]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.eta_max, 0.01);
        assert_eq!(cfg.stage1.epochs, 3);
        assert_eq!(cfg.stage2.batch_size, RunConfig::default().stage2.batch_size);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = toml::from_str::<RunConfig>("[stage1]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn csv_source_requires_paths_and_exactly_one_label_spec() {
        let mut cfg = RunConfig::default();
        cfg.data.source = DataSource::Csv;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("data.csv.view_paths"), "{err}");

        cfg.data.csv.view_paths = vec!["a.csv".into()];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("label_file"), "{err}");

        cfg.data.csv.label_file = Some("labels.csv".into());
        cfg.data.csv.label_column = Some("label".into());
        assert!(cfg.validate().is_err());

        cfg.data.csv.label_column = None;
        cfg.validate().unwrap();
    }

    #[test]
    fn batch_ordering_is_enforced() {
        let mut cfg = RunConfig::default();
        cfg.stage1.batch_size = 32;
        cfg.stage2.batch_size = 64;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("stage1.batch_size"), "{err}");
    }

    #[test]
    fn load_reports_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "seed = \"not a number\"\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
