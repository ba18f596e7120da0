//! Media ingestion.
//!
//! A media bundle is a directory holding everything the pipeline needs from a
//! video, already decoded:
//!
//! ```text
//! bundle/
//!   audio.wav          PCM 16-bit or 32-bit float; channel 0 is used
//!   frames.json        {"timestamps_s": [..]}
//!   frames/000000.png  one image per timestamp
//!   transcript.json    optional {"words": [{"w", "start_s", "end_s"}, ..]}
//! ```
//!
//! Real video files go through an external decoder command that writes such a
//! directory; see [`decode_video`].

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

pub const AUDIO_FILE: &str = "audio.wav";
pub const FRAMES_DIR: &str = "frames";
pub const FRAMES_INDEX: &str = "frames.json";
pub const TRANSCRIPT_FILE: &str = "transcript.json";

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed file {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("timestamps are not monotonic in {0}")]
    NonMonotonicTimestamps(PathBuf),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("decoder not found: {0}")]
    DecoderNotFound(String),
    #[error("decoder failed with status {code:?}: {stderr}")]
    DecoderFailed { code: Option<i32>, stderr: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl MediaError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            MediaError::MissingFile(path.to_path_buf())
        } else {
            MediaError::Io { path: path.to_path_buf(), source }
        }
    }

    fn malformed(path: &Path, reason: impl ToString) -> Self {
        MediaError::MalformedHeader { path: path.to_path_buf(), reason: reason.to_string() }
    }
}

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioTrack {
    /// Builds a track, clamping samples into [-1, 1]. Non-finite samples or a
    /// zero rate are rejected.
    pub fn new(mut samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, MediaError> {
        if sample_rate_hz == 0 {
            return Err(MediaError::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(MediaError::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        for s in &mut samples {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(AudioTrack { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Resamples by linear interpolation. Output length is
/// `round(len * target / source)`; equal rates return the input unchanged.
pub fn resample(track: &AudioTrack, target_hz: u32) -> AudioTrack {
    assert!(target_hz > 0, "target rate must be positive");
    let source_hz = track.sample_rate_hz;
    if source_hz == target_hz {
        return track.clone();
    }
    let input = &track.samples;
    let n_out = (input.len() as f64 * target_hz as f64 / source_hz as f64).round() as usize;
    let step = source_hz as f64 / target_hz as f64;
    let last = input.len().saturating_sub(1);
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64).clamp(0.0, 1.0) as f32;
            let a = input[i0];
            let b = input[i1];
            a + (b - a) * frac
        })
        .collect();
    AudioTrack { samples, sample_rate_hz: target_hz }
}

/// Video frames with their presentation timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    timestamps_s: Vec<f64>,
}

impl FrameSequence {
    /// Returns a plain reason on failure; callers attach the file context.
    pub fn new(frames: Vec<RgbImage>, timestamps_s: Vec<f64>) -> Result<Self, String> {
        if frames.len() != timestamps_s.len() {
            return Err(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps_s.len()
            ));
        }
        if timestamps_s.windows(2).any(|w| w[1] <= w[0]) || timestamps_s.iter().any(|t| !t.is_finite()) {
            return Err("timestamps must be finite and strictly increasing".into());
        }
        if let Some(first) = frames.first() {
            let dims = first.dimensions();
            if frames.iter().any(|f| f.dimensions() != dims) {
                return Err("frames differ in dimensions".into());
            }
        }
        Ok(FrameSequence { frames, timestamps_s })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn timestamps_s(&self) -> &[f64] {
        &self.timestamps_s
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub w: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimedTranscript {
    pub words: Vec<TimedWord>,
}

impl TimedTranscript {
    pub fn is_well_formed(&self) -> bool {
        self.words.iter().all(|w| w.start_s >= 0.0 && w.end_s >= w.start_s)
            && self.words.windows(2).all(|p| p[1].start_s >= p[0].start_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediaBundle {
    pub source_id: String,
    pub audio: AudioTrack,
    pub frames: FrameSequence,
    pub transcript: Option<TimedTranscript>,
}

#[derive(Serialize, Deserialize)]
struct FramesIndex {
    timestamps_s: Vec<f64>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Reads a WAV file, keeping channel 0 and resampling to `target_hz`.
pub fn load_wav(path: &Path, target_hz: u32) -> Result<AudioTrack, MediaError> {
    let mut reader = match hound::WavReader::open(path) {
        Ok(r) => r,
        Err(hound::Error::IoError(e)) => return Err(MediaError::io(path, e)),
        Err(e) => return Err(MediaError::malformed(path, e)),
    };
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(MediaError::malformed(path, "float samples must be 32-bit"));
            }
            reader
                .samples::<f32>()
                .step_by(channels)
                .collect::<Result<_, _>>()
                .map_err(|e| MediaError::malformed(path, e))?
        }
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| MediaError::malformed(path, e))?
        }
    };
    let track = AudioTrack::new(raw, spec.sample_rate)
        .map_err(|e| MediaError::malformed(path, e))?;
    Ok(resample(&track, target_hz))
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: &Path, track: &AudioTrack) -> Result<(), MediaError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: track.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(e) => MediaError::io(path, e),
        e => MediaError::malformed(path, e),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &track.samples {
        writer.write_sample(quantize_i16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

fn quantize_i16(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, MediaError> {
    let text = fs::read_to_string(path).map_err(|e| MediaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MediaError::malformed(path, e))
}

/// Loads a bundle directory, resampling its audio to `target_hz`.
pub fn load_bundle(dir: &Path, target_hz: u32) -> Result<MediaBundle, MediaError> {
    if !dir.is_dir() {
        return Err(MediaError::MissingFile(dir.to_path_buf()));
    }
    let audio = load_wav(&dir.join(AUDIO_FILE), target_hz)?;

    let index_path = dir.join(FRAMES_INDEX);
    let index: FramesIndex = read_json(&index_path)?;
    if index.timestamps_s.windows(2).any(|w| w[1] <= w[0])
        || index.timestamps_s.iter().any(|t| !t.is_finite())
    {
        return Err(MediaError::NonMonotonicTimestamps(index_path));
    }
    let frames_dir = dir.join(FRAMES_DIR);
    let mut frames = Vec::with_capacity(index.timestamps_s.len());
    for i in 0..index.timestamps_s.len() {
        let path = frames_dir.join(frame_file_name(i));
        if !path.is_file() {
            return Err(MediaError::MissingFile(path));
        }
        let img = image::open(&path).map_err(|e| MediaError::malformed(&path, e))?;
        frames.push(img.to_rgb8());
    }
    let frames = FrameSequence::new(frames, index.timestamps_s)
        .map_err(|reason| MediaError::malformed(&frames_dir, reason))?;

    let transcript_path = dir.join(TRANSCRIPT_FILE);
    let transcript = if transcript_path.is_file() {
        let t: TimedTranscript = read_json(&transcript_path)?;
        if !t.is_well_formed() {
            return Err(MediaError::NonMonotonicTimestamps(transcript_path));
        }
        Some(t)
    } else {
        None
    };

    let source_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(MediaBundle { source_id, audio, frames, transcript })
}

/// Writes `bundle` as a bundle directory. Audio is stored as 16-bit PCM.
pub fn write_bundle(bundle: &MediaBundle, dir: &Path) -> Result<(), MediaError> {
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| MediaError::io(&frames_dir, e))?;
    write_wav(&dir.join(AUDIO_FILE), &bundle.audio)?;
    for (i, frame) in bundle.frames.frames().iter().enumerate() {
        let path = frames_dir.join(frame_file_name(i));
        frame.save(&path).map_err(|e| MediaError::malformed(&path, e))?;
    }
    let index = FramesIndex { timestamps_s: bundle.frames.timestamps_s().to_vec() };
    write_json(&dir.join(FRAMES_INDEX), &index)?;
    if let Some(t) = &bundle.transcript {
        write_json(&dir.join(TRANSCRIPT_FILE), t)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), MediaError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| MediaError::malformed(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| MediaError::io(path, e))
}

/// Runs an external decoder to materialize a bundle in `outdir`, then loads it.
///
/// `decoder_command` is split on whitespace; `{input}` and `{outdir}` are
/// substituted inside each argument. No shell is involved.
pub fn decode_video(
    input: &Path,
    decoder_command: &str,
    outdir: &Path,
    target_hz: u32,
) -> Result<MediaBundle, MediaError> {
    let input_str = input.to_string_lossy();
    let outdir_str = outdir.to_string_lossy();
    let mut argv = decoder_command
        .split_whitespace()
        .map(|arg| arg.replace("{input}", &input_str).replace("{outdir}", &outdir_str));
    let program = argv
        .next()
        .ok_or_else(|| MediaError::DecoderNotFound("empty decoder command".into()))?;
    fs::create_dir_all(outdir).map_err(|e| MediaError::io(outdir, e))?;
    let output = match Command::new(&program).args(argv).output() {
        Ok(o) => o,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(MediaError::DecoderNotFound(program))
        }
        Err(e) => return Err(MediaError::Io { path: PathBuf::from(program), source: e }),
    };
    if !output.status.success() {
        return Err(MediaError::DecoderFailed {
            code: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    load_bundle(outdir, target_hz)
}
