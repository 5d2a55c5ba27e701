//! Run configuration: one TOML file, every field defaulted, unknown keys
//! rejected. Command-line flags override individual fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::network::{build_small_cnn, NetworkSpec};
use crate::neurons::NeuronKind;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in architecture, used when `network` is absent.
    pub preset: String,
    pub neuron: NeuronKind,
    pub timesteps: usize,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Directory receiving the checkpoint, metrics and resolved config.
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    /// Explicit architecture. Its neuron layers are set to `neuron` and its
    /// step count to `timesteps`.
    pub network: Option<NetworkSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "cnn-mnist".into(),
            neuron: NeuronKind::Ternary,
            timesteps: 2,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            output_dir: PathBuf::from("runs/latest"),
            train: TrainConfig::default(),
            network: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Serde(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        self.train.validate()?;
        self.network_spec().map(|_| ())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut spec = match &self.network {
            Some(spec) => spec.with_neuron_kind(self.neuron),
            None => build_small_cnn(&self.preset, self.neuron, self.timesteps)?,
        };
        spec.timesteps = self.timesteps;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Dataset::load(self.dataset, &self.data_dir)?.truncated(self.train_limit, self.test_limit)
    }
}
