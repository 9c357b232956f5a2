//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! ks = [1, 3, 5, 10]
//!
//! [planner]
//! positive_count = 64
//!
//! [noise]
//! ground_error_rate = 0.1
//! ```
//!
//! Every section is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GenConfig;
use crate::eval::{BaselineGrid, EvalConfig, DEFAULT_KS};
use crate::noise::NoiseConfig;
use crate::planner::PlannerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ks: Vec<usize>,
    pub planner: PlannerConfig,
    pub noise: NoiseConfig,
    pub generator: GenConfig,
    pub baselines: BaselineGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ks: DEFAULT_KS.to_vec(),
            planner: PlannerConfig::default(),
            noise: NoiseConfig::default(),
            generator: GenConfig::default(),
            baselines: BaselineGrid::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_toml(body: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(body)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.planner.validate().map_err(|e| invalid(e.to_string()))?;
        self.noise.validate().map_err(|e| invalid(e.to_string()))?;
        self.generator.validate().map_err(|e| invalid(e.to_string()))?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(invalid("ks must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            ks: self.ks.clone(),
            planner: self.planner.clone(),
            noise: self.noise,
        }
    }
}
