use std::fs;
use std::path::{Path, PathBuf};

use mer_core::PipelineConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;
pub const ENV_PREFIX: &str = "MER_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Job directories live under `{data_dir}/jobs`.
    pub data_dir: PathBuf,
    pub model: PathBuf,
    /// Overrides the vocabulary stored in the model archive.
    pub vocab: Option<PathBuf>,
    pub thresholds: PathBuf,
    pub pipeline: PipelineConfig,
    pub max_upload_bytes: usize,
    pub max_parallel_jobs: usize,
    /// Pause after each utterance; for demos and paced tests.
    pub utterance_delay_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("mer-data"),
            model: PathBuf::from("model"),
            vocab: None,
            thresholds: PathBuf::from("thresholds.json"),
            pipeline: PipelineConfig::default(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            max_parallel_jobs: 2,
            utterance_delay_ms: 0,
        }
    }
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub bind: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub max_upload_bytes: Option<usize>,
    pub max_parallel_jobs: Option<usize>,
    pub utterance_delay_ms: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
#[error("service config: {0}")]
pub struct ConfigError(pub String);

fn parse_env<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError(format!("{ENV_PREFIX}{key}={value:?} is not valid")))
}

impl ServiceConfig {
    /// Layers, lowest first: defaults, `file`, `MER_*` variables from `env`, `flags`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &Overrides,
    ) -> Result<Self, ConfigError> {
        let mut cfg = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => ServiceConfig::default(),
        };
        for (key, value) in env {
            let Some(key) = key.strip_prefix(ENV_PREFIX) else { continue };
            match key {
                "BIND" => cfg.bind = value,
                "DATA_DIR" => cfg.data_dir = value.into(),
                "MODEL" => cfg.model = value.into(),
                "VOCAB" => cfg.vocab = Some(value.into()),
                "THRESHOLDS" => cfg.thresholds = value.into(),
                "MAX_UPLOAD_BYTES" => cfg.max_upload_bytes = parse_env(key, &value)?,
                "MAX_PARALLEL_JOBS" => cfg.max_parallel_jobs = parse_env(key, &value)?,
                "UTTERANCE_DELAY_MS" => cfg.utterance_delay_ms = parse_env(key, &value)?,
                "DECODER_COMMAND" => cfg.pipeline.decoder_command = Some(value),
                _ => {}
            }
        }
        let f = flags.clone();
        cfg.bind = f.bind.unwrap_or(cfg.bind);
        cfg.data_dir = f.data_dir.unwrap_or(cfg.data_dir);
        cfg.model = f.model.unwrap_or(cfg.model);
        cfg.vocab = f.vocab.or(cfg.vocab);
        cfg.thresholds = f.thresholds.unwrap_or(cfg.thresholds);
        cfg.max_upload_bytes = f.max_upload_bytes.unwrap_or(cfg.max_upload_bytes);
        cfg.max_parallel_jobs = f.max_parallel_jobs.unwrap_or(cfg.max_parallel_jobs);
        cfg.utterance_delay_ms = f.utterance_delay_ms.unwrap_or(cfg.utterance_delay_ms);
        if cfg.max_parallel_jobs == 0 {
            return Err(ConfigError("max_parallel_jobs must be at least 1".into()));
        }
        cfg.pipeline.validate().map_err(ConfigError)?;
        Ok(cfg)
    }
}
