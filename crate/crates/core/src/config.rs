//! Flat TOML experiment configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SyntheticSpec, Task};
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::search::{SearchConfig, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Inherit,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Every key with its default; see `ExperimentConfig::default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: Arch,
    pub base_channels: usize,
    pub n_groups: usize,
    pub precision: Precision,

    pub lambda: f64,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub search_lr_decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub warmup_noise: bool,
    pub cost_uses_sampled_probs: bool,
    pub scale_before_bn: bool,
    pub weight_steps_per_gate_step: usize,

    pub train_epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub finetune_mode: FinetuneMode,
    pub train_baseline: bool,
    pub uniform_baseline: bool,

    /// Binary training set; synthetic data is generated when absent.
    pub data_path: Option<PathBuf>,
    /// Binary test set; without it a fifth of `data_path` is held out.
    pub test_data_path: Option<PathBuf>,
    pub task: Task,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub channels: usize,
    pub image_size: usize,
    pub noise: f64,

    pub out_dir: PathBuf,
    pub report_format: ReportFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        ExperimentConfig {
            seed: 0,
            arch: Arch::PlainCnn6,
            base_channels: 8,
            n_groups: 8,
            precision: Precision::F32,
            lambda: s.lambda,
            warmup_epochs: s.warmup_epochs,
            search_epochs: s.search_epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            search_lr_decay_epochs: s.search_lr_decay_epochs,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            val_fraction: s.val_fraction,
            tau_start: s.tau_start,
            tau_end: s.tau_end,
            warmup_noise: s.warmup_noise,
            cost_uses_sampled_probs: s.cost_uses_sampled_probs,
            scale_before_bn: s.scale_before_bn,
            weight_steps_per_gate_step: s.weight_steps_per_gate_step,
            train_epochs: 12,
            lr_decay_epochs: vec![8],
            finetune_mode: FinetuneMode::Inherit,
            train_baseline: true,
            uniform_baseline: true,
            data_path: None,
            test_data_path: None,
            task: Task::Classify,
            num_classes: 10,
            n_train: 1000,
            n_test: 500,
            channels: 3,
            image_size: 16,
            noise: 0.3,
            out_dir: PathBuf::from("runs/dcss"),
            report_format: ReportFormat::Json,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.search_config().validate()?;
        if self.base_channels == 0 || self.n_groups == 0 {
            return Err(Error::Config("base_channels and n_groups must be positive".into()));
        }
        if self.data_path.is_none() {
            if self.n_train == 0 || self.n_test == 0 || self.channels == 0 || self.image_size == 0 {
                return Err(Error::Config("synthetic data needs positive sizes".into()));
            }
            if self.num_classes == 0 || self.num_classes > 256 {
                return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
            }
        } else if self.task == Task::Regress {
            return Err(Error::Config("binary datasets carry labels only; use task = \"classify\"".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            lambda: self.lambda,
            warmup_epochs: self.warmup_epochs,
            search_epochs: self.search_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            search_lr_decay_epochs: self.search_lr_decay_epochs.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            val_fraction: self.val_fraction,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            warmup_noise: self.warmup_noise,
            cost_uses_sampled_probs: self.cost_uses_sampled_probs,
            scale_before_bn: self.scale_before_bn,
            weight_steps_per_gate_step: self.weight_steps_per_gate_step,
        }
    }

    /// The full training schedule shared by the baseline and fine-tuning.
    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.train_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            decay_epochs: self.lr_decay_epochs.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            task: self.task,
            num_classes: self.num_classes,
            n_samples: self.n_train + self.n_test,
            channels: self.channels,
            height: self.image_size,
            width: self.image_size,
            noise: self.noise,
        }
    }

    /// Hex SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("lambda = 1.5\nseed = 3").is_ok());
        let err = ExperimentConfig::from_toml("lamda = 1.5").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(ExperimentConfig::from_toml("lambda = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("arch = \"vgg\"").is_err());
    }

    #[test]
    fn defaults_round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut moved = cfg.clone();
        moved.out_dir = "elsewhere".into();
        assert_eq!(moved.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.lambda = 0.5;
        assert_ne!(other.hash(), cfg.hash());
    }
}
