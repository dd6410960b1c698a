//! Run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SubsetDeclaration;
use crate::rebalance::BalanceConfig;
use crate::resample::SamplingConfig;
use crate::synth::CorpusProfile;
use crate::train::TrainConfig;
use crate::ulog::VehicleTypeTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("writing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where flights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A directory of `.ulg` files.
    UlogDir { path: PathBuf },
    /// A flight cache written by `ingest` or `synth`.
    Cache { path: PathBuf },
    /// A corpus generated on the fly.
    Synth(CorpusProfile),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(CorpusProfile::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    /// Trial the tradeoff table compares against.
    pub reference_trial: u32,
    /// Id given to a single `evaluate` run.
    pub trial_id: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            seed: 0,
            reference_trial: 1,
            trial_id: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub vehicle_types: VehicleTypeTable,
    pub features: SubsetDeclaration,
    pub sampling: SamplingConfig,
    pub balance: BalanceConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataSource::default(),
            vehicle_types: VehicleTypeTable::default(),
            features: SubsetDeclaration::default(),
            sampling: SamplingConfig::default(),
            balance: BalanceConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks every block before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.sampling.validate().map_err(|e| invalid(&e))?;
        self.balance.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if self.eval.k < 2 {
            return Err(ConfigError::Invalid("eval.k must be at least 2".into()));
        }
        if self.features.base.is_empty() {
            return Err(ConfigError::Invalid("features.base is empty".into()));
        }
        if !(self.features.coverage_threshold > 0.0 && self.features.coverage_threshold <= 1.0) {
            return Err(ConfigError::Invalid("features.coverage_threshold must lie in (0, 1]".into()));
        }
        if let DataSource::Synth(p) = &self.data {
            if p.quadrotor + p.hexarotor + p.fixed_wing == 0 || !(p.sample_rate_hz > 0.0) {
                return Err(ConfigError::Invalid("synthetic corpus is empty".into()));
            }
        }
        Ok(())
    }
}
