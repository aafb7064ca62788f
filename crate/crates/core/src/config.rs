//! Run configuration: one TOML file with a section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkSpec;
use crate::models::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::reward::TrainConfig;
use crate::trainer::JointConfig;
use crate::world::{sha256_hex, World, WorldConfig};

/// Environment variable consulted when neither the command line nor the
/// config file gives a seed.
pub const SEED_ENV: &str = "PLUS_LAB_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{SEED_ENV}={0:?} is not an unsigned integer")]
    SeedEnv(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub world: WorldConfig,
    /// A vocabulary size of 0 is filled in from the world.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub rm: TrainConfig,
    pub joint: JointConfig,
    pub bench: BenchmarkSpec,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(|e| bad(&e))?;
        self.world_model(0).validate().map_err(|e| bad(&e))?;
        self.rm.validate().map_err(|e| bad(&e))?;
        self.joint.validate().map_err(|e| bad(&e))?;
        self.bench.validate().map_err(|e| bad(&e))?;
        if self.pretrain.batch_size == 0 || self.pretrain.seq_len < 16 {
            return Err(ConfigError::Invalid("pretrain needs batch_size ≥ 1 and seq_len ≥ 16".into()));
        }
        Ok(())
    }

    fn world_model(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab: if self.model.vocab == 0 { vocab.max(1) } else { self.model.vocab },
            ..self.model
        }
    }

    /// The model config with the vocabulary of `world`.
    pub fn model_for(&self, world: &World) -> ModelConfig {
        self.world_model(world.vocab.len())
    }

    pub fn build_world(&self) -> Result<World, ConfigError> {
        World::new(self.world.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Field-ordered JSON of the whole config.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, stamped into every artifact.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// Command-line seed, else the config seed, else the environment, else 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, ConfigError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| ConfigError::SeedEnv(v)),
            Err(_) => Ok(0),
        }
    }
}
