//! Seeded synthetic media bundles and the reference model used by the
//! golden tests.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{ModelArchive, ModelConfig};
use crate::encoder::{EncoderConfig, EncoderWeights, POOLED_LEN};
use crate::extract::Vocab;
use crate::fusion::{FusionConfig, FusionWeights};
use crate::media::{AudioTrack, FrameSequence, MediaBundle, TimedTranscript, TimedWord, DEFAULT_SAMPLE_RATE};

pub const FRAME_RATE: usize = 10;
pub const FRAME_WIDTH: u32 = 64;
pub const FRAME_HEIGHT: u32 = 48;
const NOISE_LEVEL: f32 = 0.001;
const SPEECH_LEVEL: f32 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    Silence,
    OneUtt,
    TwoUtt,
}

impl FixtureKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "silence" => Some(FixtureKind::Silence),
            "one-utt" => Some(FixtureKind::OneUtt),
            "two-utt" => Some(FixtureKind::TwoUtt),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::Silence => "silence",
            FixtureKind::OneUtt => "one-utt",
            FixtureKind::TwoUtt => "two-utt",
        }
    }

    /// Total length in seconds.
    pub fn duration_s(self) -> usize {
        match self {
            FixtureKind::Silence => 3,
            FixtureKind::OneUtt => 4,
            FixtureKind::TwoUtt => 6,
        }
    }

    /// Intervals where the synthetic voice is on.
    pub fn speech(self) -> &'static [(f64, f64)] {
        match self {
            FixtureKind::Silence => &[],
            FixtureKind::OneUtt => &[(1.0, 2.5)],
            FixtureKind::TwoUtt => &[(0.8, 2.3), (3.4, 5.2)],
        }
    }

    fn script(self) -> &'static [&'static str] {
        match self {
            FixtureKind::Silence => &[],
            FixtureKind::OneUtt => &["i am really happy today"],
            FixtureKind::TwoUtt => &["this is wonderful news!", "I can't believe it, that's awful."],
        }
    }
}

/// Words known to the reference vocabulary.
pub const REFERENCE_WORDS: [&str; 32] = [
    "i", "am", "really", "happy", "today", "this", "is", "wonderful", "news", "cant", "believe", "it",
    "thats", "awful", "sad", "angry", "afraid", "surprised", "disgusted", "so", "very", "not", "the",
    "a", "you", "we", "what", "great", "terrible", "oh", "no", "yes",
];

pub fn reference_vocab() -> Vocab {
    Vocab::with_words(&REFERENCE_WORDS).expect("reference words are unique")
}

/// A voiced-looking signal: harmonic stack with a slow syllable envelope.
fn voice(t: f64) -> f64 {
    use std::f64::consts::TAU;
    let envelope = 0.6 + 0.4 * (TAU * 4.0 * t).sin();
    let harmonics: f64 = (1..=4).map(|h| (TAU * 140.0 * h as f64 * t).sin() / h as f64).sum();
    envelope * harmonics / 2.0833
}

pub fn generate(kind: FixtureKind, seed: u64) -> MediaBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7266_6978);
    let rate = DEFAULT_SAMPLE_RATE as usize;
    let n = kind.duration_s() * rate;
    let speech = kind.speech();
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let noise = rng.random_range(-NOISE_LEVEL..NOISE_LEVEL);
            let on = speech.iter().any(|&(a, b)| t >= a && t < b);
            if on {
                SPEECH_LEVEL * voice(t) as f32 + noise
            } else {
                noise
            }
        })
        .collect();
    let audio = AudioTrack::new(samples, DEFAULT_SAMPLE_RATE).expect("finite samples");

    let skin = Rgb([rng.random_range(150..230u8), rng.random_range(110..170u8), rng.random_range(80..140u8)]);
    let n_frames = kind.duration_s() * FRAME_RATE;
    let mut frames = Vec::with_capacity(n_frames);
    let mut timestamps = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = i as f64 / FRAME_RATE as f64;
        let speaking = speech.iter().any(|&(a, b)| t >= a && t < b);
        let dx = rng.random_range(-2i32..=2);
        let dy = rng.random_range(-1i32..=1);
        frames.push(face_frame(skin, dx, dy, speaking, i));
        timestamps.push(t);
    }
    let frames = FrameSequence::new(frames, timestamps).expect("fixture frames are consistent");

    let transcript = (!speech.is_empty()).then(|| {
        let mut words = Vec::new();
        for (&(a, b), line) in speech.iter().zip(kind.script()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let inner = (a + 0.1, b - 0.1);
            let step = (inner.1 - inner.0) / parts.len() as f64;
            for (j, w) in parts.iter().enumerate() {
                let start = inner.0 + j as f64 * step;
                words.push(TimedWord { w: w.to_string(), start_s: round3(start), end_s: round3(start + 0.8 * step) });
            }
        }
        TimedTranscript { words }
    });

    MediaBundle { source_id: kind.name().to_string(), audio, frames, transcript }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn face_frame(skin: Rgb<u8>, dx: i32, dy: i32, speaking: bool, index: usize) -> RgbImage {
    let (w, h) = (FRAME_WIDTH as i32, FRAME_HEIGHT as i32);
    let (cx, cy) = (w / 2 + dx, h / 2 + dy);
    let (rx, ry) = (14.0f64, 18.0f64);
    let shade = (index % 7) as u8 * 3;
    RgbImage::from_fn(FRAME_WIDTH, FRAME_HEIGHT, |x, y| {
        let (x, y) = (x as i32, y as i32);
        let u = (x - cx) as f64 / rx;
        let v = (y - cy) as f64 / ry;
        if u * u + v * v > 1.0 {
            return Rgb([40 + shade, 60 + (y as u8), 90 + (x as u8)]);
        }
        let eye = (y - (cy - 5)).abs() <= 1 && ((x - (cx - 5)).abs() <= 1 || (x - (cx + 5)).abs() <= 1);
        let mouth_h = if speaking { 3 } else { 0 };
        let mouth = (x - cx).abs() <= 4 && y >= cy + 8 && y <= cy + 8 + mouth_h;
        if eye || mouth {
            Rgb([30, 20, 20])
        } else {
            skin
        }
    })
}

fn uniform_f32<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    rng.random_range(-bound..bound) as f32 as f64
}

/// Seeded model with every value representable in `f32`.
pub fn reference_model_with(enc: EncoderConfig, fus: FusionConfig, vocab: Vocab, seed: u64) -> ModelArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vis_bound = 2.0 / (POOLED_LEN as f64).sqrt();
    let aco_bound = 4.0 / (enc.acoustic_window as f64).sqrt();
    let vis_proj = Array2::from_shape_fn((enc.d_visual, POOLED_LEN), |_| uniform_f32(&mut rng, vis_bound));
    let aco_proj = Array2::from_shape_fn((enc.d_acoustic, enc.acoustic_window), |_| uniform_f32(&mut rng, aco_bound));
    let txt_emb = Array2::from_shape_fn((vocab.len(), enc.d_textual), |(r, _)| {
        let v = uniform_f32(&mut rng, 1.0);
        if r == 0 {
            0.0
        } else {
            v
        }
    });

    let mut fusion = FusionWeights::random(&fus, &mut rng);
    fusion.lin1_w.mapv_inplace(|x| 2.0 * x);
    fusion.lin2_w.mapv_inplace(|x| 4.0 * x);
    fusion.lin2_b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    fusion.round_to_f32();

    ModelArchive {
        config: ModelConfig::new(enc, fus),
        encoder: EncoderWeights { vis_proj, aco_proj, txt_emb },
        fusion,
        vocab: Some(vocab),
    }
}

/// The shipped reference model: default dimensions and vocabulary.
pub fn reference_model(seed: u64) -> ModelArchive {
    reference_model_with(EncoderConfig::default(), FusionConfig::default(), reference_vocab(), seed)
}
