//! Pipeline configuration file (JSON) and backend construction.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderConfig, ExternalEncoder, ReferenceEncoder, EncoderWeights};
use crate::extract::{CenterCrop, ExternalFaceCrop, ExternalStt, Extractor, FaceCropBackend, Stt, Vocab};
use crate::media::DEFAULT_SAMPLE_RATE;
use crate::vad::{EnergyVad, ExternalVad, VadBackend, VadConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {reason}")]
    Invalid { path: String, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SttConfig {
    #[default]
    Sidecar,
    None,
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEncoderConfig {
    pub command: String,
    pub graph: PathBuf,
    #[serde(default)]
    pub concurrent_safe: bool,
}

/// Backend selection for one pipeline run. Every field has a default, so
/// `{}` selects the reference backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sample_rate_hz: u32,
    pub vad: VadConfig,
    pub vad_command: Option<String>,
    pub face_command: Option<String>,
    pub stt: SttConfig,
    pub decoder_command: Option<String>,
    pub encoder: Option<ExternalEncoderConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            vad: VadConfig::default(),
            vad_command: None,
            face_command: None,
            stt: SttConfig::Sidecar,
            decoder_command: None,
            encoder: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::Invalid { path: origin.to_string(), reason: e.to_string() })?;
        cfg.validate().map_err(|reason| ConfigError::Invalid { path: origin.to_string(), reason })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sample_rate_hz == 0 {
            return Err("sample_rate_hz must be positive".into());
        }
        self.vad.validate().map_err(|e| e.to_string())
    }

    pub fn vad_backend(&self) -> Box<dyn VadBackend> {
        match &self.vad_command {
            Some(cmd) => Box::new(ExternalVad::new(cmd)),
            None => Box::new(EnergyVad::new(self.vad)),
        }
    }

    pub fn extractor(&self, vocab: Vocab) -> Extractor {
        let face: Box<dyn FaceCropBackend> = match &self.face_command {
            Some(cmd) => Box::new(ExternalFaceCrop::new(cmd)),
            None => Box::new(CenterCrop),
        };
        let stt = match &self.stt {
            SttConfig::Sidecar => Stt::Sidecar,
            SttConfig::None => Stt::Disabled,
            SttConfig::External(cmd) => Stt::External(Box::new(ExternalStt::new(cmd))),
        };
        Extractor { face, stt, vocab }
    }

    /// The configured encoder, or the reference encoder over `weights`.
    pub fn encoder(&self, config: EncoderConfig, weights: EncoderWeights) -> Result<Box<dyn Encoder>, String> {
        Ok(match &self.encoder {
            Some(ext) => Box::new(ExternalEncoder::new(&ext.command, ext.graph.clone(), config, ext.concurrent_safe)),
            None => Box::new(ReferenceEncoder::new(config, weights).map_err(|e| e.to_string())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(PipelineConfig::from_json("{}", "t").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn stt_forms() {
        let c = PipelineConfig::from_json(r#"{"stt": "none"}"#, "t").unwrap();
        assert_eq!(c.stt, SttConfig::None);
        let c = PipelineConfig::from_json(r#"{"stt": {"external": "whisper-adapter"}}"#, "t").unwrap();
        assert_eq!(c.stt, SttConfig::External("whisper-adapter".into()));
    }

    #[test]
    fn rejects_unknown_fields_and_bad_vad() {
        assert!(PipelineConfig::from_json(r#"{"vda": {}}"#, "t").is_err());
        assert!(PipelineConfig::from_json(r#"{"vad": {"frame_ms": 5, "hop_ms": 10}}"#, "t").is_err());
    }
}
