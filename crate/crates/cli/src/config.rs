//! Experiment configuration: a JSON file with a `schema_version` field and
//! hard rejection of unknown keys. Seeds are explicit per domain (data,
//! model, train); repeat i of a run family uses splitmix64(base + i) of each
//! domain seed.

use std::path::{Path, PathBuf};

use overparam_core::data::MixtureSpec;
use overparam_core::model::InitSigmaConvention;
use overparam_core::rng::{derive_seed, splitmix64};
use overparam_core::train::{BatchScheme, TrainConfig, TrainMode};

use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<usize>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Accuracy level the sweep tables are computed at.
    #[serde(default = "default_accuracy_target")]
    pub accuracy_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_repeats() -> usize {
    1
}

fn default_accuracy_target() -> f64 {
    0.98
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic mixture: n_train + n_test points are sampled in one call
    /// and split, so both halves share the same component centers.
    Mixture {
        k: usize,
        l: usize,
        dim: usize,
        sigma: f64,
        sigma0: f64,
        /// Component probabilities, class-major; uniform when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<Vec<f64>>,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        normalize: bool,
        seed: u64,
    },
    /// IDX image/label pairs (the MNIST container format).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Optional truncation to the first n points.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_test: Option<usize>,
        #[serde(default)]
        normalize: bool,
        /// Kept so `--seed` rederivation applies uniformly; IDX loading
        /// itself is deterministic.
        #[serde(default)]
        seed: u64,
    },
}

impl DataConfig {
    pub fn seed(&self) -> u64 {
        match self {
            DataConfig::Mixture { seed, .. } | DataConfig::Idx { seed, .. } => *seed,
        }
    }

    pub fn set_seed(&mut self, value: u64) {
        match self {
            DataConfig::Mixture { seed, .. } | DataConfig::Idx { seed, .. } => *seed = value,
        }
    }

    pub fn normalize(&self) -> bool {
        match self {
            DataConfig::Mixture { normalize, .. } | DataConfig::Idx { normalize, .. } => {
                *normalize
            }
        }
    }

    pub fn mixture_spec(&self) -> Result<Option<MixtureSpec>, CliError> {
        match self {
            DataConfig::Mixture {
                k,
                l,
                dim,
                sigma,
                sigma0,
                probs,
                ..
            } => {
                let spec = match probs {
                    Some(p) => MixtureSpec::new(*k, *l, *dim, *sigma, *sigma0, p.clone()),
                    None => MixtureSpec::uniform(*k, *l, *dim, *sigma, *sigma0),
                }
                .map_err(CliError::from_core)?;
                Ok(Some(spec))
            }
            DataConfig::Idx { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(default = "default_convention")]
    pub init_sigma_convention: InitSigmaConvention,
}

fn default_convention() -> InitSigmaConvention {
    InitSigmaConvention::Std
}

/// Learning rate: either an absolute value or a numerator scaled by the
/// width, `eta = per_m / m`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Absolute(f64),
    PerM { per_m: f64 },
}

impl EtaSpec {
    pub fn resolve(self, m: usize) -> f64 {
        match self {
            EtaSpec::Absolute(v) => v,
            EtaSpec::PerM { per_m } => per_m / m as f64,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub eta: EtaSpec,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_scheme")]
    pub batch_scheme: BatchScheme,
    /// Records land every `diag_every` steps; defaults to max(1, steps/100).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_every: Option<usize>,
}

fn default_mode() -> TrainMode {
    TrainMode::MinibatchSgd
}

fn default_scheme() -> BatchScheme {
    BatchScheme::FreshUniform
}

impl TrainSection {
    pub fn train_config(&self, m: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.eta.resolve(m),
            batch_size: self.batch_size,
            steps: self.steps,
            seed,
            mode: self.mode,
            batch_scheme: self.batch_scheme,
            diag_every: self
                .diag_every
                .unwrap_or_else(|| TrainConfig::default_diag_every(self.steps)),
        }
    }
}

/// Seeds resolved for one repeat.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RepeatSeeds {
    pub repeat: usize,
    pub data: u64,
    pub model: u64,
    pub train: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.repeats < 1 {
            return Err(CliError::Config("repeats must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_target) {
            return Err(CliError::Config(
                "accuracy_target must be in [0, 1]".into(),
            ));
        }
        if let DataConfig::Mixture {
            n_train, n_test, k, ..
        } = &self.data
        {
            if *n_train == 0 || *n_test == 0 {
                return Err(CliError::Config(
                    "n_train and n_test must be >= 1".into(),
                ));
            }
            if *k != self.model.k {
                return Err(CliError::Config(format!(
                    "data k = {k} does not match model k = {}",
                    self.model.k
                )));
            }
        }
        self.data.mixture_spec()?;
        if let Some(sweep) = &self.sweep {
            if sweep.is_empty() {
                return Err(CliError::Config("sweep list must be nonempty".into()));
            }
            if sweep.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CliError::Config(
                    "sweep values must be strictly increasing".into(),
                ));
            }
        }
        if self.model.m == 0 {
            return Err(CliError::Config("model.m must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies the `--seed` override: all three domain seeds are rederived
    /// from one base via consecutive splitmix64 outputs.
    pub fn override_seed(&mut self, base: u64) {
        let mut s = base;
        self.data.set_seed(splitmix64(&mut s));
        self.model.seed = splitmix64(&mut s);
        self.train.seed = splitmix64(&mut s);
    }

    pub fn repeat_seeds(&self, repeat: usize) -> RepeatSeeds {
        RepeatSeeds {
            repeat,
            data: derive_seed(self.data.seed(), repeat as u64),
            model: derive_seed(self.model.seed, repeat as u64),
            train: derive_seed(self.train.seed, repeat as u64),
        }
    }
}
