//! Run configuration as read from JSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{sds, Features, MachineConfig};
use crate::phantom::{PhantomConfig, PhantomError};
use crate::uarch::UarchConfig;

/// Environment variable that overrides `phantom.seed`.
pub const SEED_ENV: &str = "PNS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub n: u8,
    pub delta: u32,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        PhantomSection { n: p.n, delta: p.delta, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub max_cycles: u64,
    pub trials: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { max_cycles: 10_000_000, trials: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub phantom: PhantomSection,
    pub features: Features,
    pub uarch: UarchConfig,
    pub sds_capacity: Option<usize>,
    pub budgets: Budgets,
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Phantom(#[from] PhantomError),
    #[error("config: {0}")]
    Uarch(String),
    #[error("config: {SEED_ENV}={0:?} is not an unsigned integer")]
    Seed(String),
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigFileError> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        self.phantom_config().validate()?;
        self.uarch.validate().map_err(|e| ConfigFileError::Uarch(e.to_string()))?;
        Ok(())
    }

    /// Applies a seed override taken from the environment, if set.
    pub fn with_seed_override(mut self, value: Option<String>) -> Result<Self, ConfigFileError> {
        if let Some(v) = value {
            self.phantom.seed = v.trim().parse().map_err(|_| ConfigFileError::Seed(v))?;
        }
        Ok(self)
    }

    pub fn with_env(self) -> Result<Self, ConfigFileError> {
        self.with_seed_override(std::env::var(SEED_ENV).ok())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig { n: self.phantom.n, delta: self.phantom.delta }
    }

    pub fn seed(&self) -> u64 {
        self.phantom.seed
    }

    pub fn to_machine(&self) -> MachineConfig {
        MachineConfig {
            phantom: self.phantom_config(),
            features: self.features,
            uarch: self.uarch,
            sds_capacity: self.sds_capacity.unwrap_or(sds::DEFAULT_CAPACITY),
        }
    }
}
