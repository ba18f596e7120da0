//! Per-utterance model inputs.
//!
//! Each utterance is reduced to three fixed-shape inputs: five face crops,
//! ten seconds of audio, and one hundred token ids. Short inputs are padded
//! with zeros at the tail; long ones keep their head.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, SubprocessAdapter};
use crate::media::{AudioTrack, FrameSequence, MediaBundle, TimedTranscript};
use crate::vad::UtteranceSpan;

pub const N_FACES: usize = 5;
pub const FACE_SIZE: usize = 160;
pub const FACE_LEN: usize = FACE_SIZE * FACE_SIZE * 3;
pub const AUDIO_SECONDS: usize = 10;
pub const MAX_TOKENS: usize = 100;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("span [{start_s}, {end_s}] is outside the {duration_s} s track")]
    SpanOutOfRange { start_s: f64, end_s: f64, duration_s: f64 },
    #[error("image has zero size")]
    EmptyImage,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// One normalized 160x160 RGB crop, row-major HWC. All-zero means padding.
#[derive(Clone, PartialEq)]
pub struct FaceTensor(Vec<f32>);

impl std::fmt::Debug for FaceTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FaceTensor({} values)", self.0.len())
    }
}

impl FaceTensor {
    pub fn zeros() -> Self {
        FaceTensor(vec![0.0; FACE_LEN])
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        assert_eq!(values.len(), FACE_LEN);
        FaceTensor(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Undoes the normalization, for display.
    pub fn to_image(&self) -> RgbImage {
        let raw = self.0.iter().map(|&v| (v * 128.0 + 127.5).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(FACE_SIZE as u32, FACE_SIZE as u32, raw).expect("face buffer size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub images: Vec<FaceTensor>,
    pub n_real: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticInput {
    pub samples: Vec<f32>,
    pub n_real: usize,
    pub sample_rate_hz: u32,
}

impl AcousticInput {
    pub fn real_seconds(&self) -> f64 {
        self.n_real as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextInput {
    pub token_ids: Vec<u32>,
    pub n_real: usize,
}

/// Audio under the span, truncated to its first ten seconds or zero-padded
/// at the tail up to ten seconds.
pub fn slice_audio(track: &AudioTrack, span: &UtteranceSpan) -> Result<AcousticInput, ExtractError> {
    let rate = track.sample_rate_hz() as f64;
    let out_of_range = || ExtractError::SpanOutOfRange {
        start_s: span.start_s,
        end_s: span.end_s,
        duration_s: track.duration_s(),
    };
    if !(span.start_s >= 0.0 && span.start_s < span.end_s) {
        return Err(out_of_range());
    }
    let start = (span.start_s * rate).floor() as usize;
    let end = (span.end_s * rate).floor() as usize;
    if end > track.len() {
        return Err(out_of_range());
    }
    let target = AUDIO_SECONDS * track.sample_rate_hz() as usize;
    let mut samples: Vec<f32> = track.samples()[start..end].iter().take(target).copied().collect();
    let n_real = samples.len();
    samples.resize(target, 0.0);
    Ok(AcousticInput { samples, n_real, sample_rate_hz: track.sample_rate_hz() })
}

/// `n` evenly spread indices into `0..t`, rounding half up. Requires `t >= n`.
pub fn sample_indices(t: usize, n: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![0; n];
    }
    // floor(i (t-1) / (n-1) + 1/2) in integer arithmetic
    (0..n).map(|i| (2 * i * (t - 1) + (n - 1)) / (2 * (n - 1))).collect()
}

/// Picks `n` frames inside the span (timestamps within `[start, end]`).
/// Missing slots are `None` and become zero images downstream.
pub fn sample_frames<'a>(frames: &'a FrameSequence, span: &UtteranceSpan, n: usize) -> Vec<Option<&'a RgbImage>> {
    let in_span: Vec<&RgbImage> = frames
        .frames()
        .iter()
        .zip(frames.timestamps_s())
        .filter(|(_, &t)| t >= span.start_s && t <= span.end_s)
        .map(|(f, _)| f)
        .collect();
    let mut out: Vec<Option<&RgbImage>> = if in_span.len() >= n {
        sample_indices(in_span.len(), n).into_iter().map(|i| Some(in_span[i])).collect()
    } else {
        in_span.into_iter().map(Some).collect()
    };
    out.resize(n, None);
    out
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    /// Largest centred square.
    pub fn center_square(width: u32, height: u32) -> Self {
        let side = width.min(height);
        let x0 = (width - side) / 2;
        let y0 = (height - side) / 2;
        BBox::new(x0, y0, x0 + side, y0 + side)
    }

    fn clamp_to(self, width: u32, height: u32) -> Self {
        BBox::new(self.x0.min(width), self.y0.min(height), self.x1.min(width), self.y1.min(height))
    }
}

pub trait FaceCropBackend: Send + Sync {
    fn locate(&self, image: &RgbImage) -> Result<BBox, BackendError>;
}

/// Reference face locator: the centred maximal square.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterCrop;

impl FaceCropBackend for CenterCrop {
    fn locate(&self, image: &RgbImage) -> Result<BBox, BackendError> {
        Ok(BBox::center_square(image.width(), image.height()))
    }
}

#[derive(Serialize)]
struct FaceRequest {
    width: u32,
    height: u32,
    rgb_base64: String,
}

/// External face detector. Request carries the raw RGB buffer in base64;
/// response is a [`BBox`].
#[derive(Debug, Clone)]
pub struct ExternalFaceCrop {
    adapter: SubprocessAdapter,
}

impl ExternalFaceCrop {
    pub fn new(command: &str) -> Self {
        ExternalFaceCrop { adapter: SubprocessAdapter::new("face", command) }
    }
}

impl FaceCropBackend for ExternalFaceCrop {
    fn locate(&self, image: &RgbImage) -> Result<BBox, BackendError> {
        let request = FaceRequest {
            width: image.width(),
            height: image.height(),
            rgb_base64: base64::engine::general_purpose::STANDARD.encode(image.as_raw()),
        };
        self.adapter.call(&request)
    }
}

/// Bilinear resize of `region` to `out x out`, half-pixel centres, edge clamped.
/// Returns raw pixel values (0..=255 scale), HWC.
pub fn resize_bilinear(image: &RgbImage, region: BBox, out: usize) -> Vec<f32> {
    let (w, h) = (region.width() as usize, region.height() as usize);
    let sx = w as f64 / out as f64;
    let sy = h as f64 / out as f64;
    let axis = |d: usize, scale: f64, len: usize| {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out).map(|d| axis(d, sx, w)).collect();
    let mut values = Vec::with_capacity(out * out * 3);
    for dy in 0..out {
        let (y0, y1, fy) = axis(dy, sy, h);
        for &(x0, x1, fx) in &xs {
            let px = |x: usize, y: usize| image.get_pixel(region.x0 + x as u32, region.y0 + y as u32).0;
            let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f32 + (b[ch] as f32 - a[ch] as f32) * fx;
                let bottom = c[ch] as f32 + (d[ch] as f32 - c[ch] as f32) * fx;
                values.push(top + (bottom - top) * fy);
            }
        }
    }
    values
}

pub fn normalize_pixel(p: f32) -> f32 {
    (p - 127.5) / 128.0
}

#[derive(Debug, Clone)]
pub struct FaceCrop {
    pub tensor: FaceTensor,
    pub diagnostic: Option<String>,
}

/// Crops the box the backend reports and resizes it to 160x160. A failing
/// backend, or a box with no area inside the image, falls back to the centre
/// crop and is reported in `diagnostic`.
pub fn crop_face(image: &RgbImage, backend: &dyn FaceCropBackend) -> Result<FaceCrop, ExtractError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(ExtractError::EmptyImage);
    }
    let (region, diagnostic) = match backend.locate(image) {
        Ok(b) => {
            let b = b.clamp_to(w, h);
            if b.width() == 0 || b.height() == 0 {
                (BBox::center_square(w, h), Some("face box empty; used center crop".to_string()))
            } else {
                (b, None)
            }
        }
        Err(e) => (BBox::center_square(w, h), Some(format!("{e}; used center crop"))),
    };
    let mut values = resize_bilinear(image, region, FACE_SIZE);
    for v in &mut values {
        *v = normalize_pixel(*v);
    }
    Ok(FaceCrop { tensor: FaceTensor(values), diagnostic })
}

pub trait SttBackend: Send + Sync {
    fn transcribe(&self, samples: &[f32], sample_rate_hz: u32) -> Result<String, BackendError>;
}

#[derive(Serialize)]
struct SttRequest<'a> {
    sample_rate_hz: u32,
    samples: &'a [f32],
}

#[derive(Deserialize)]
struct SttResponse {
    text: String,
}

#[derive(Debug, Clone)]
pub struct ExternalStt {
    adapter: SubprocessAdapter,
}

impl ExternalStt {
    pub fn new(command: &str) -> Self {
        ExternalStt { adapter: SubprocessAdapter::new("stt", command) }
    }
}

impl SttBackend for ExternalStt {
    fn transcribe(&self, samples: &[f32], sample_rate_hz: u32) -> Result<String, BackendError> {
        let r: SttResponse = self.adapter.call(&SttRequest { sample_rate_hz, samples })?;
        Ok(r.text)
    }
}

/// Where utterance text comes from.
pub enum Stt {
    /// Words from the bundle's timed transcript.
    Sidecar,
    External(Box<dyn SttBackend>),
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcription {
    pub text: String,
    pub diagnostic: Option<String>,
}

/// Utterance text. The sidecar keeps words whose midpoint lies in the span.
pub fn transcribe(
    track: &AudioTrack,
    span: &UtteranceSpan,
    stt: &Stt,
    transcript: Option<&TimedTranscript>,
) -> Transcription {
    let plain = |text: String| Transcription { text, diagnostic: None };
    match stt {
        Stt::Sidecar => match transcript {
            Some(t) => plain(
                t.words
                    .iter()
                    .filter(|w| {
                        let mid = (w.start_s + w.end_s) / 2.0;
                        mid >= span.start_s && mid <= span.end_s
                    })
                    .map(|w| w.w.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            None => plain(String::new()),
        },
        Stt::External(backend) => {
            let rate = track.sample_rate_hz() as f64;
            let start = ((span.start_s * rate).floor() as usize).min(track.len());
            let end = ((span.end_s * rate).floor() as usize).clamp(start, track.len());
            match backend.transcribe(&track.samples()[start..end], track.sample_rate_hz()) {
                Ok(text) => plain(text),
                Err(e) => Transcription { text: String::new(), diagnostic: Some(e.to_string()) },
            }
        }
        Stt::Disabled => plain(String::new()),
    }
}

/// Word vocabulary. Id 0 is padding, id 1 is unknown; neither is reachable
/// through lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// `tokens[i]` has id `i`; the first two entries are the reserved slots.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ExtractError> {
        if tokens.len() < 2 {
            return Err(ExtractError::InvalidVocab("need at least the <pad> and <unk> entries".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(ExtractError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Vocabulary with the reserved slots followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self, ExtractError> {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Vocab::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExtractError::InvalidVocab(format!("{}: {e}", path.display())))?;
        let file: VocabFile = serde_json::from_str(&text)
            .map_err(|e| ExtractError::InvalidVocab(format!("{}: {e}", path.display())))?;
        Vocab::from_tokens(file.tokens)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() }).expect("vocab json")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Lowercased whitespace-separated words with ASCII punctuation removed.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TextInput {
    let mut token_ids: Vec<u32> = words(text).take(MAX_TOKENS).map(|w| vocab.id(&w)).collect();
    let n_real = token_ids.len();
    token_ids.resize(MAX_TOKENS, PAD_ID);
    TextInput { token_ids, n_real }
}

/// Everything the model sees for one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceClip {
    pub span: UtteranceSpan,
    pub audio: AcousticInput,
    pub visual: VisualInput,
    pub text: String,
    pub tokens: TextInput,
    pub diagnostics: Vec<String>,
}

/// Backends and vocabulary used to build clips.
pub struct Extractor {
    pub face: Box<dyn FaceCropBackend>,
    pub stt: Stt,
    pub vocab: Vocab,
}

impl Extractor {
    pub fn reference(vocab: Vocab) -> Self {
        Extractor { face: Box::new(CenterCrop), stt: Stt::Sidecar, vocab }
    }

    pub fn clip(&self, bundle: &MediaBundle, span: &UtteranceSpan) -> Result<UtteranceClip, ExtractError> {
        let mut diagnostics = Vec::new();
        let audio = slice_audio(&bundle.audio, span)?;

        let mut images = Vec::with_capacity(N_FACES);
        let mut n_real = 0;
        for slot in sample_frames(&bundle.frames, span, N_FACES) {
            match slot {
                Some(img) => {
                    let crop = crop_face(img, self.face.as_ref())?;
                    diagnostics.extend(crop.diagnostic);
                    images.push(crop.tensor);
                    n_real += 1;
                }
                None => images.push(FaceTensor::zeros()),
            }
        }

        let t = transcribe(&bundle.audio, span, &self.stt, bundle.transcript.as_ref());
        diagnostics.extend(t.diagnostic);
        let tokens = tokenize(&t.text, &self.vocab);
        Ok(UtteranceClip {
            span: *span,
            audio,
            visual: VisualInput { images, n_real },
            text: t.text,
            tokens,
            diagnostics,
        })
    }
}
