//! Service settings: defaults, then a TOML file, then environment overrides.

use std::path::{Path, PathBuf};

use myoband::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PORT: &str = "MYOBAND_PORT";
pub const ENV_DATA_DIR: &str = "MYOBAND_DATA_DIR";
pub const ENV_CONFIG: &str = "MYOBAND_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Root for recordings (`S01/D1/session.dat`), models and benchmark output.
    pub data_dir: PathBuf,
    /// Speed of the simulated wristband relative to real time.
    pub rate_multiplier: f64,
    /// Raw samples averaged into one display sample.
    pub decimation: usize,
    /// Display messages buffered per stream client before the oldest is dropped.
    pub client_queue: usize,
    /// Interval between progress messages during a trial.
    pub progress_tick_ms: f64,
    /// Blocks of the subject's synthetic calibration session used to train
    /// the online model when no recording exists in `data_dir`.
    pub training_blocks: usize,
    /// JSON file with a synthesizer configuration.
    pub synth_config: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            rate_multiplier: 1.0,
            decimation: 10,
            client_queue: 256,
            progress_tick_ms: 100.0,
            training_blocks: 4,
            synth_config: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })
    }

    /// Defaults, overlaid with `path` if given, then with the environment.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(p) = env(ENV_PORT) {
            self.port = p.trim().parse().map_err(|_| ConfigError::Invalid(format!("{ENV_PORT}={p} is not a port number")))?;
        }
        if let Some(d) = env(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate_multiplier > 0.0) {
            return Err(ConfigError::Invalid(format!("rate_multiplier must be positive, got {}", self.rate_multiplier)));
        }
        if self.decimation == 0 || self.client_queue == 0 {
            return Err(ConfigError::Invalid("decimation and client_queue must be at least 1".into()));
        }
        if !(self.progress_tick_ms > 0.0) {
            return Err(ConfigError::Invalid("progress_tick_ms must be positive".into()));
        }
        if self.training_blocks == 0 {
            return Err(ConfigError::Invalid("training_blocks must be at least 1".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> anyhow::Result<SynthConfig> {
        let cfg = match &self.synth_config {
            Some(p) => SynthConfig::from_json_file(p)?,
            None => SynthConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
