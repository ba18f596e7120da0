//! Utterance segmentation.
//!
//! The reference detector thresholds per-frame RMS energy against a noise floor
//! estimated as a low percentile of the clip's own frame energies, so the
//! decision is relative and does not depend on the recording gain. Short bursts
//! are dropped, short pauses are bridged, and each utterance is padded on
//! both sides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, SubprocessAdapter};
use crate::media::AudioTrack;

/// Floor added to RMS before taking the log, so digital silence maps to -200 dB.
pub const RMS_EPSILON: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum VadError {
    #[error("audio track is empty")]
    EmptyAudio,
    #[error("invalid VAD config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    BackendFailure(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VadConfig {
    pub frame_ms: u32,
    pub hop_ms: u32,
    pub floor_percentile: f64,
    pub onset_db_above_floor: f64,
    pub min_speech_ms: u32,
    pub min_silence_ms: u32,
    pub pad_ms: u32,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            frame_ms: 30,
            hop_ms: 10,
            floor_percentile: 10.0,
            onset_db_above_floor: 10.0,
            min_speech_ms: 250,
            min_silence_ms: 300,
            pad_ms: 100,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        if self.hop_ms == 0 || self.frame_ms < self.hop_ms {
            return Err(VadError::InvalidConfig("need frame_ms >= hop_ms > 0".into()));
        }
        if !(0.0..=100.0).contains(&self.floor_percentile) {
            return Err(VadError::InvalidConfig("floor_percentile must be within [0, 100]".into()));
        }
        if !self.onset_db_above_floor.is_finite() {
            return Err(VadError::InvalidConfig("onset_db_above_floor must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl UtteranceSpan {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        UtteranceSpan { start_s, end_s }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Per-frame RMS level in dB. Frames are `frame_ms` long every `hop_ms`; a
/// trailing partial frame is dropped.
pub fn frame_energies(track: &AudioTrack, cfg: &VadConfig) -> Result<Vec<f64>, VadError> {
    cfg.validate()?;
    if track.is_empty() {
        return Err(VadError::EmptyAudio);
    }
    let rate = track.sample_rate_hz() as u64;
    let frame_len = ((cfg.frame_ms as u64 * rate + 500) / 1000).max(1) as usize;
    let hop = ((cfg.hop_ms as u64 * rate + 500) / 1000).max(1) as usize;
    let samples = track.samples();
    if samples.len() < frame_len {
        return Ok(Vec::new());
    }
    let n_frames = (samples.len() - frame_len) / hop + 1;
    Ok((0..n_frames)
        .map(|i| {
            let frame = &samples[i * hop..i * hop + frame_len];
            let power = frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / frame_len as f64;
            20.0 * (power.sqrt() + RMS_EPSILON).log10()
        })
        .collect())
}

/// Linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Turns frame energies into utterance spans.
///
/// Frame `i` is attributed the interval of length `hop` centred on its analysis
/// window. Speech runs shorter than `min_speech_ms` are discarded, then pauses
/// shorter than `min_silence_ms` are bridged, then each span is padded by
/// `pad_ms`, clipped to `[0, duration_s]` and re-merged where padding made
/// neighbours overlap.
pub fn detect_spans(energies: &[f64], cfg: &VadConfig, duration_s: f64) -> Vec<UtteranceSpan> {
    if energies.is_empty() {
        return Vec::new();
    }
    let threshold = percentile(energies, cfg.floor_percentile) + cfg.onset_db_above_floor;

    // Inclusive frame-index runs above threshold.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &e) in energies.iter().enumerate() {
        match (e > threshold, open) {
            (true, None) => open = Some(i),
            (false, Some(a)) => {
                runs.push((a, i - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(a) = open {
        runs.push((a, energies.len() - 1));
    }

    let hop_ms = cfg.hop_ms as u64;
    runs.retain(|&(a, b)| (b - a + 1) as u64 * hop_ms >= cfg.min_speech_ms as u64);

    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if ((run.0 - last.1 - 1) as u64 * hop_ms) < cfg.min_silence_ms as u64 => {
                last.1 = run.1
            }
            _ => merged.push(run),
        }
    }

    let hop_s = cfg.hop_ms as f64 / 1000.0;
    let offset_s = (cfg.frame_ms - cfg.hop_ms) as f64 / 2000.0;
    let pad_s = cfg.pad_ms as f64 / 1000.0;
    let padded = merged.into_iter().map(|(a, b)| {
        let start = a as f64 * hop_s + offset_s;
        let end = (b + 1) as f64 * hop_s + offset_s;
        UtteranceSpan::new(start - pad_s, end + pad_s)
    });
    normalize_spans(padded, duration_s)
}

/// Clips to `[0, duration_s]`, drops empty spans, sorts, and merges overlaps.
pub fn normalize_spans(spans: impl IntoIterator<Item = UtteranceSpan>, duration_s: f64) -> Vec<UtteranceSpan> {
    let mut spans: Vec<UtteranceSpan> = spans
        .into_iter()
        .filter(|s| s.start_s.is_finite() && s.end_s.is_finite())
        .map(|s| UtteranceSpan::new(s.start_s.max(0.0), s.end_s.min(duration_s)))
        .filter(|s| s.end_s > s.start_s)
        .collect();
    spans.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut out: Vec<UtteranceSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start_s < last.end_s => last.end_s = last.end_s.max(s.end_s),
            _ => out.push(s),
        }
    }
    out
}

pub trait VadBackend: Send + Sync {
    fn detect(&self, track: &AudioTrack) -> Result<Vec<UtteranceSpan>, VadError>;
}

/// The built-in energy detector.
#[derive(Debug, Clone, Default)]
pub struct EnergyVad {
    pub config: VadConfig,
}

impl EnergyVad {
    pub fn new(config: VadConfig) -> Self {
        EnergyVad { config }
    }
}

impl VadBackend for EnergyVad {
    fn detect(&self, track: &AudioTrack) -> Result<Vec<UtteranceSpan>, VadError> {
        let energies = frame_energies(track, &self.config)?;
        Ok(detect_spans(&energies, &self.config, track.duration_s()))
    }
}

#[derive(Serialize)]
struct VadRequest<'a> {
    sample_rate_hz: u32,
    samples: &'a [f32],
}

/// Delegates to an external program speaking the JSON adapter protocol. The
/// response is a span list `[{"start_s": .., "end_s": ..}, ..]`.
#[derive(Debug, Clone)]
pub struct ExternalVad {
    adapter: SubprocessAdapter,
}

impl ExternalVad {
    pub fn new(command: &str) -> Self {
        ExternalVad { adapter: SubprocessAdapter::new("vad", command) }
    }
}

impl VadBackend for ExternalVad {
    fn detect(&self, track: &AudioTrack) -> Result<Vec<UtteranceSpan>, VadError> {
        let request = VadRequest { sample_rate_hz: track.sample_rate_hz(), samples: track.samples() };
        Ok(self.adapter.call(&request)?)
    }
}

/// Runs `backend` and normalizes whatever it returns into sorted,
/// non-overlapping spans inside the track.
pub fn segment(track: &AudioTrack, backend: &dyn VadBackend) -> Result<Vec<UtteranceSpan>, VadError> {
    let spans = backend.detect(track)?;
    Ok(normalize_spans(spans, track.duration_s()))
}
