//! Run configuration: one JSON file describing a run, with command-line
//! flags taking precedence over file values and the `ARSRANK_SEED`
//! environment variable as a last-resort seed source.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::TrainConfig;

/// Environment variable consulted when neither a flag nor the config
/// file sets the seed.
pub const SEED_ENV: &str = "ARSRANK_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid {SEED_ENV} value {value:?}: must be an unsigned integer")]
    BadEnvSeed { value: String },
    #[error("missing required path: {0}")]
    MissingPath(&'static str),
}

/// File locations a run may reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    #[serde(default)]
    pub predict_data: Option<PathBuf>,
    #[serde(default)]
    pub embedding_store: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
}

/// Union of the training configuration, run paths and verbosity.
/// Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: RunPaths,
    #[serde(default)]
    pub verbosity: u8,
}

/// A parsed config file plus which optional values it set explicitly.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub seed_from_file: bool,
}

/// Loads the run config; `None` yields pure defaults.
pub fn load_run_config(path: Option<&Path>) -> Result<LoadedConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(LoadedConfig { config: RunConfig::default(), seed_from_file: false });
    };
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: display.clone(), source })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: display.clone(), msg: e.to_string() })?;
    let seed_from_file = value.pointer("/train/seed").is_some();
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| ConfigError::Parse { path: display, msg: e.to_string() })?;
    Ok(LoadedConfig { config, seed_from_file })
}

/// Seed precedence: `--seed` flag, then the config file, then
/// `ARSRANK_SEED`, then the default already in the config.
pub fn resolve_seed(
    flag: Option<u64>,
    loaded: &LoadedConfig,
) -> Result<u64, ConfigError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if loaded.seed_from_file {
        return Ok(loaded.config.train.seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(value) => value
            .trim()
            .parse::<u64>()
            .map_err(|_| ConfigError::BadEnvSeed { value }),
        Err(_) => Ok(loaded.config.train.seed),
    }
}
