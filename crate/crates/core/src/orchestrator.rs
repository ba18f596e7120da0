//! End-to-end run over one media bundle: segment, extract, encode, fuse,
//! threshold, and stream ordered events.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::archive::ModelArchive;
use crate::calibrate::{apply_thresholds, Thresholds};
use crate::config::PipelineConfig;
use crate::encoder::Encoder;
use crate::extract::{Extractor, UtteranceClip, Vocab};
use crate::fusion::{forward, FusionWeights, ModalEmbeddings, EMOTIONS, N_EMOTIONS};
use crate::media::{write_wav, AudioTrack, MediaBundle};
use crate::vad::{segment, UtteranceSpan, VadBackend, VadError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("segmentation failed: {0}")]
    Vad(#[from] VadError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("run cancelled")]
    Cancelled,
    #[error("event sink: {0}")]
    Sink(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputSummary {
    pub n_real_frames: usize,
    pub audio_real_s: f64,
    pub n_real_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceResult {
    pub index: usize,
    pub span: UtteranceSpan,
    pub transcript: String,
    pub probs: [f64; N_EMOTIONS],
    /// Emotion indices, ascending.
    pub active: Vec<usize>,
    pub input_summary: InputSummary,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoStatus {
    Ok,
    NoSpeech,
}

impl VideoStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VideoStatus::Ok => "ok",
            VideoStatus::NoSpeech => "no_speech",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoResult {
    pub utterances: Vec<UtteranceResult>,
    pub avg_probs: [f64; N_EMOTIONS],
    pub avg_active: Vec<usize>,
    pub status: VideoStatus,
}

/// Elementwise mean; zeros for an empty list.
pub fn average_probs(results: &[UtteranceResult]) -> [f64; N_EMOTIONS] {
    let mut avg = [0.0; N_EMOTIONS];
    if results.is_empty() {
        return avg;
    }
    for r in results {
        for (a, p) in avg.iter_mut().zip(r.probs) {
            *a += p;
        }
    }
    avg.map(|s| s / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Utterance { result: UtteranceResult, thresholds: Thresholds },
    UtteranceError { index: usize, error: String },
    Final { status: VideoStatus, avg_probs: [f64; N_EMOTIONS], active: Vec<usize> },
    /// Job-level failure; only produced by the service.
    Failed { error: String },
}

/// Fixed six-decimal rendering; never prints a negative zero.
fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

fn string(s: &str) -> String {
    serde_json::to_string(s).expect("string json")
}

fn emotion_map(values: &[f64; N_EMOTIONS]) -> String {
    let body: Vec<String> = EMOTIONS.iter().zip(values).map(|(e, v)| format!("\"{e}\":{}", num(*v))).collect();
    format!("{{{}}}", body.join(","))
}

fn emotion_list(ids: &[usize]) -> String {
    let body: Vec<String> = ids.iter().map(|&i| format!("\"{}\"", EMOTIONS[i])).collect();
    format!("[{}]", body.join(","))
}

impl Event {
    /// One NDJSON line, newline included.
    pub fn to_line(&self) -> String {
        let mut out = String::new();
        match self {
            Event::Utterance { result: r, thresholds } => {
                let diags: Vec<String> = r.diagnostics.iter().map(|d| string(d)).collect();
                let s = &r.input_summary;
                write!(
                    out,
                    "{{\"type\":\"utterance\",\"index\":{},\"start_s\":{},\"end_s\":{},\"transcript\":{},\
                     \"probs\":{},\"active\":{},\"thresholds\":{},\
                     \"input_summary\":{{\"n_real_frames\":{},\"audio_real_s\":{},\"n_real_tokens\":{}}},\
                     \"diagnostics\":[{}]}}",
                    r.index,
                    num(r.span.start_s),
                    num(r.span.end_s),
                    string(&r.transcript),
                    emotion_map(&r.probs),
                    emotion_list(&r.active),
                    emotion_map(thresholds),
                    s.n_real_frames,
                    num(s.audio_real_s),
                    s.n_real_tokens,
                    diags.join(",")
                )
            }
            Event::UtteranceError { index, error } => {
                write!(out, "{{\"type\":\"utterance_error\",\"index\":{index},\"error\":{}}}", string(error))
            }
            Event::Final { status, avg_probs, active } => write!(
                out,
                "{{\"type\":\"final\",\"status\":\"{}\",\"avg_probs\":{},\"active\":{}}}",
                status.as_str(),
                emotion_map(avg_probs),
                emotion_list(active)
            ),
            Event::Failed { error } => write!(out, "{{\"type\":\"failed\",\"error\":{}}}", string(error)),
        }
        .expect("writing to a String");
        out.push('\n');
        out
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Event::Final { .. } | Event::Failed { .. })
    }
}

/// Receives events in emission order. `clip` is offered before the
/// corresponding utterance event.
pub trait EventSink {
    fn event(&mut self, event: &Event) -> io::Result<()>;

    fn clip(&mut self, _index: usize, _clip: &UtteranceClip) -> io::Result<()> {
        Ok(())
    }
}

impl EventSink for Vec<Event> {
    fn event(&mut self, event: &Event) -> io::Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

/// Writes each event as an NDJSON line.
pub struct NdjsonSink<W: Write>(pub W);

impl<W: Write> EventSink for NdjsonSink<W> {
    fn event(&mut self, event: &Event) -> io::Result<()> {
        self.0.write_all(event.to_line().as_bytes())?;
        self.0.flush()
    }
}

/// Face crops (`faces/{j}.png`, real slots only) and the spoken audio
/// (`audio.wav`) of one clip.
pub fn write_clip_artifacts(dir: &Path, clip: &UtteranceClip) -> io::Result<()> {
    let faces = dir.join("faces");
    fs::create_dir_all(&faces)?;
    for (j, face) in clip.visual.images.iter().take(clip.visual.n_real).enumerate() {
        face.to_image().save(faces.join(format!("{j}.png"))).map_err(io::Error::other)?;
    }
    let audio = &clip.audio;
    let track = AudioTrack::new(audio.samples[..audio.n_real].to_vec(), audio.sample_rate_hz).map_err(io::Error::other)?;
    write_wav(&dir.join("audio.wav"), &track).map_err(io::Error::other)
}

/// Cancellation flag checked at utterance boundaries, and an optional pause
/// after each utterance (used to pace demos and tests).
#[derive(Debug, Default, Clone, Copy)]
pub struct RunControl<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub pace: Duration,
}

impl RunControl<'_> {
    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.load(Ordering::SeqCst))
    }
}

pub struct Pipeline {
    pub vad: Box<dyn VadBackend>,
    pub extractor: Extractor,
    pub encoder: Box<dyn Encoder>,
    pub fusion: FusionWeights,
    pub thresholds: Thresholds,
}

impl Pipeline {
    /// Builds backends from `cfg`. `vocab` overrides the archive's vocabulary.
    pub fn from_config(
        cfg: &PipelineConfig,
        archive: &ModelArchive,
        vocab: Option<Vocab>,
        thresholds: Thresholds,
    ) -> Result<Self, PipelineError> {
        let vocab = vocab
            .or_else(|| archive.vocab.clone())
            .ok_or_else(|| PipelineError::Config("model archive has no vocabulary and none was given".into()))?;
        let encoder = cfg
            .encoder(archive.config.encoder, archive.encoder.clone())
            .map_err(PipelineError::Config)?;
        Ok(Pipeline {
            vad: cfg.vad_backend(),
            extractor: cfg.extractor(vocab),
            encoder,
            fusion: archive.fusion.clone(),
            thresholds,
        })
    }

    pub fn embed(&self, clip: &UtteranceClip) -> Result<ModalEmbeddings, String> {
        let visual = self.encoder.encode_visual(&clip.visual).map_err(|e| format!("visual encoder: {e}"))?;
        let acoustic = self.encoder.encode_acoustic(&clip.audio).map_err(|e| format!("acoustic encoder: {e}"))?;
        let textual = self.encoder.encode_textual(&clip.tokens).map_err(|e| format!("textual encoder: {e}"))?;
        Ok(ModalEmbeddings { visual, acoustic, textual })
    }

    fn utterance(&self, bundle: &MediaBundle, index: usize, span: &UtteranceSpan) -> Result<(UtteranceClip, UtteranceResult), String> {
        let clip = self.extractor.clip(bundle, span).map_err(|e| format!("extraction: {e}"))?;
        let embeddings = self.embed(&clip)?;
        let pred = forward(&embeddings, &self.fusion).map_err(|e| format!("fusion: {e}"))?;
        let result = UtteranceResult {
            index,
            span: *span,
            transcript: clip.text.clone(),
            probs: pred.probs,
            active: apply_thresholds(&pred.probs, &self.thresholds),
            input_summary: InputSummary {
                n_real_frames: clip.visual.n_real,
                audio_real_s: clip.audio.real_seconds(),
                n_real_tokens: clip.tokens.n_real,
            },
            diagnostics: clip.diagnostics.clone(),
        };
        Ok((clip, result))
    }

    /// Runs the whole flow. Every event reaches `sink` before this returns;
    /// an utterance that fails is reported and left out of the average.
    pub fn run(&self, bundle: &MediaBundle, sink: &mut dyn EventSink, control: RunControl<'_>) -> Result<VideoResult, PipelineError> {
        let spans = segment(&bundle.audio, self.vad.as_ref())?;
        let mut utterances = Vec::with_capacity(spans.len());
        for (index, span) in spans.iter().enumerate() {
            if control.cancelled() {
                return Err(PipelineError::Cancelled);
            }
            match self.utterance(bundle, index, span) {
                Ok((clip, result)) => {
                    sink.clip(index, &clip)?;
                    sink.event(&Event::Utterance { result: result.clone(), thresholds: self.thresholds })?;
                    utterances.push(result);
                }
                Err(error) => sink.event(&Event::UtteranceError { index, error })?,
            }
            if !control.pace.is_zero() {
                std::thread::sleep(control.pace);
            }
        }
        if control.cancelled() {
            return Err(PipelineError::Cancelled);
        }
        let (status, avg_probs, avg_active) = if spans.is_empty() {
            (VideoStatus::NoSpeech, [0.0; N_EMOTIONS], Vec::new())
        } else {
            let avg = average_probs(&utterances);
            (VideoStatus::Ok, avg, apply_thresholds(&avg, &self.thresholds))
        };
        sink.event(&Event::Final { status, avg_probs, active: avg_active.clone() })?;
        Ok(VideoResult { utterances, avg_probs, avg_active, status })
    }
}
