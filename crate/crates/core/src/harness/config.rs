use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Preset;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::tensor::Precision;
use crate::transforms::{GradTransformSpec, TransformKind, DEFAULT_CLIP_THRESHOLD, DEFAULT_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Spirals,
    RingGaussians,
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn needs_files(self) -> bool {
        matches!(self, DatasetKind::Mnist | DatasetKind::Cifar10)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Spirals => "spirals",
            DatasetKind::RingGaussians => "ring-gaussians",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

/// One training run. Read from a flat TOML file; every key is optional and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dataset: DatasetKind,
    /// Directory holding the MNIST or CIFAR-10 files.
    pub data_dir: Option<PathBuf>,
    /// Sample count of a synthetic dataset.
    pub n: usize,
    /// Noise level of a synthetic dataset.
    pub noise: f64,
    /// Seed of a synthetic dataset, separate from `seed` so that seeds
    /// vary the initialization and order over one fixed dataset.
    pub data_seed: u64,
    /// Cap on training examples, applied before the validation split.
    pub train_limit: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub transform: TransformKind,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Overlap and gradient-statistics cadence in steps; 0 disables.
    pub probe_every: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::ResMlpS,
            dataset: DatasetKind::Spirals,
            data_dir: None,
            n: 2000,
            noise: 0.05,
            data_seed: 0,
            train_limit: None,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay_epochs: Vec::new(),
            transform: TransformKind::Identity,
            epsilon: DEFAULT_EPSILON,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
            epochs: 30,
            seed: 1,
            probe_every: 10,
            out_dir: PathBuf::from("runs/run"),
            precision: Precision::F32,
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
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn transform_spec(&self) -> GradTransformSpec {
        GradTransformSpec {
            kind: self.transform,
            epsilon: self.epsilon,
            clip_threshold: self.clip_threshold,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let mut o = OptimizerConfig::new(self.optimizer, self.lr);
        o.momentum = self.momentum;
        o.weight_decay = self.weight_decay;
        o
    }

    pub fn validate(&self) -> Result<()> {
        self.transform_spec().validate()?;
        self.optimizer_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train_limit must be positive".into()));
        }
        if self.dataset.needs_files() && self.data_dir.is_none() {
            return Err(Error::Config(format!("dataset {} needs data_dir", self.dataset)));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_decay_epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, ignoring `out_dir`.
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
    fn parses_flat_keys() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            preset = "resnet-8"
            dataset = "cifar10"
            data_dir = "/data/cifar"
            transform = "znorm"
            optimizer = "momentum"
            lr = 0.05
            lr_decay_epochs = [3, 4]
            precision = "f64"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::ResNet8);
        assert_eq!(cfg.transform, TransformKind::Znorm);
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.epochs, 30);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let err = ExperimentConfig::from_toml("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(ExperimentConfig::from_toml("transform = \"sign\"").is_err());
        assert!(ExperimentConfig::from_toml("batch_size = 0").is_err());
        assert!(ExperimentConfig::from_toml("epsilon = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("dataset = \"mnist\"").is_err());
        assert!(ExperimentConfig::from_toml("lr = -1.0").is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
