//! Modality encoders: fixed-shape inputs to embedding sequences.
//!
//! [`ReferenceEncoder`] is a set of single linear maps with no bias. Anything
//! heavier plugs in behind [`Encoder`]; [`ExternalEncoder`] forwards the
//! three calls to an inference runtime over the subprocess adapter.

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, SubprocessAdapter};
use crate::extract::{AcousticInput, TextInput, VisualInput, FACE_SIZE, N_FACES};

/// Rows are time steps, columns embedding features.
pub type EmbeddingSeq = Array2<f64>;

pub const POOL_GRID: usize = 8;
pub const POOLED_LEN: usize = POOL_GRID * POOL_GRID * 3;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub d_textual: usize,
    pub acoustic_window: usize,
    pub acoustic_hop: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_visual: 512, d_acoustic: 768, d_textual: 768, acoustic_window: 400, acoustic_hop: 320 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.d_visual == 0 || self.d_acoustic == 0 || self.d_textual == 0 {
            return Err(EncodeError::ShapeMismatch("embedding dims must be positive".into()));
        }
        if self.acoustic_hop == 0 || self.acoustic_window < self.acoustic_hop {
            return Err(EncodeError::ShapeMismatch("need acoustic_window >= acoustic_hop > 0".into()));
        }
        Ok(())
    }

    /// Number of acoustic frames for `n_samples` input samples.
    pub fn acoustic_steps(&self, n_samples: usize) -> usize {
        if n_samples < self.acoustic_window {
            0
        } else {
            (n_samples - self.acoustic_window) / self.acoustic_hop + 1
        }
    }
}

pub trait Encoder: Send + Sync {
    fn encode_visual(&self, input: &VisualInput) -> Result<EmbeddingSeq, EncodeError>;
    fn encode_acoustic(&self, input: &AcousticInput) -> Result<EmbeddingSeq, EncodeError>;
    fn encode_textual(&self, input: &TextInput) -> Result<EmbeddingSeq, EncodeError>;
    /// Whether one instance may serve several jobs at once.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Tensors of the reference encoders: `vis.proj` (d_visual x 192),
/// `aco.proj` (d_acoustic x window) and `txt.emb` (vocab x d_textual).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub vis_proj: Array2<f64>,
    pub aco_proj: Array2<f64>,
    pub txt_emb: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    config: EncoderConfig,
    weights: EncoderWeights,
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<(), EncodeError> {
    if got != want {
        return Err(EncodeError::ShapeMismatch(format!("{name}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

impl ReferenceEncoder {
    pub fn new(config: EncoderConfig, weights: EncoderWeights) -> Result<Self, EncodeError> {
        config.validate()?;
        expect_shape("vis.proj", weights.vis_proj.shape(), &[config.d_visual, POOLED_LEN])?;
        expect_shape("aco.proj", weights.aco_proj.shape(), &[config.d_acoustic, config.acoustic_window])?;
        if weights.txt_emb.ncols() != config.d_textual || weights.txt_emb.nrows() == 0 {
            return Err(EncodeError::ShapeMismatch(format!(
                "txt.emb: expected [V, {}], got {:?}",
                config.d_textual,
                weights.txt_emb.shape()
            )));
        }
        Ok(ReferenceEncoder { config, weights })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }
}

/// Mean over 20x20 blocks of a 160x160x3 face, flattened (row, col, channel).
pub fn pool_face(face: &[f32]) -> Vec<f64> {
    let block = FACE_SIZE / POOL_GRID;
    let mut pooled = vec![0.0f64; POOLED_LEN];
    for y in 0..FACE_SIZE {
        let by = y / block;
        for x in 0..FACE_SIZE {
            let cell = (by * POOL_GRID + x / block) * 3;
            let px = (y * FACE_SIZE + x) * 3;
            for ch in 0..3 {
                pooled[cell + ch] += face[px + ch] as f64;
            }
        }
    }
    let area = (block * block) as f64;
    pooled.iter_mut().for_each(|v| *v /= area);
    pooled
}

impl Encoder for ReferenceEncoder {
    fn encode_visual(&self, input: &VisualInput) -> Result<EmbeddingSeq, EncodeError> {
        if input.images.len() != N_FACES {
            return Err(EncodeError::ShapeMismatch(format!("expected {N_FACES} faces, got {}", input.images.len())));
        }
        let mut pooled = Array2::<f64>::zeros((N_FACES, POOLED_LEN));
        for (i, face) in input.images.iter().enumerate() {
            for (j, v) in pool_face(face.as_slice()).into_iter().enumerate() {
                pooled[[i, j]] = v;
            }
        }
        Ok(pooled.dot(&self.weights.vis_proj.t()))
    }

    fn encode_acoustic(&self, input: &AcousticInput) -> Result<EmbeddingSeq, EncodeError> {
        let (window, hop) = (self.config.acoustic_window, self.config.acoustic_hop);
        let steps = self.config.acoustic_steps(input.samples.len());
        if steps == 0 {
            return Err(EncodeError::ShapeMismatch(format!(
                "{} samples is shorter than one {window}-sample window",
                input.samples.len()
            )));
        }
        let frames = Array2::from_shape_fn((steps, window), |(t, j)| input.samples[t * hop + j] as f64);
        Ok(frames.dot(&self.weights.aco_proj.t()))
    }

    fn encode_textual(&self, input: &TextInput) -> Result<EmbeddingSeq, EncodeError> {
        let table = &self.weights.txt_emb;
        let mut out = Array2::<f64>::zeros((input.token_ids.len(), self.config.d_textual));
        for (i, &id) in input.token_ids.iter().enumerate() {
            if id as usize >= table.nrows() {
                return Err(EncodeError::IdOutOfRange { id, vocab: table.nrows() });
            }
            out.row_mut(i).assign(&table.row(id as usize));
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    modality: &'a str,
    graph: &'a std::path::Path,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct EncodeResponse {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Encoders served by an external runtime that loads `graph`.
#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    adapter: SubprocessAdapter,
    graph: PathBuf,
    config: EncoderConfig,
    concurrent_safe: bool,
}

impl ExternalEncoder {
    pub fn new(command: &str, graph: PathBuf, config: EncoderConfig, concurrent_safe: bool) -> Self {
        ExternalEncoder { adapter: SubprocessAdapter::new("encoder", command), graph, config, concurrent_safe }
    }

    fn call(&self, modality: &str, shape: Vec<usize>, data: Vec<f64>, dim: usize) -> Result<EmbeddingSeq, EncodeError> {
        let r: EncodeResponse = self.adapter.call(&EncodeRequest { modality, graph: &self.graph, shape, data })?;
        if r.cols != dim || r.rows == 0 || r.data.len() != r.rows * r.cols {
            return Err(EncodeError::ShapeMismatch(format!(
                "{modality} encoder returned {}x{} with {} values, expected width {dim}",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        Ok(Array2::from_shape_vec((r.rows, r.cols), r.data).expect("checked length"))
    }
}

impl Encoder for ExternalEncoder {
    fn encode_visual(&self, input: &VisualInput) -> Result<EmbeddingSeq, EncodeError> {
        let data = input.images.iter().flat_map(|f| f.as_slice().iter().map(|&v| v as f64)).collect();
        self.call("visual", vec![input.images.len(), FACE_SIZE, FACE_SIZE, 3], data, self.config.d_visual)
    }

    fn encode_acoustic(&self, input: &AcousticInput) -> Result<EmbeddingSeq, EncodeError> {
        let data = input.samples.iter().map(|&v| v as f64).collect();
        self.call("acoustic", vec![input.samples.len()], data, self.config.d_acoustic)
    }

    fn encode_textual(&self, input: &TextInput) -> Result<EmbeddingSeq, EncodeError> {
        let data = input.token_ids.iter().map(|&v| v as f64).collect();
        self.call("textual", vec![input.token_ids.len()], data, self.config.d_textual)
    }

    fn concurrent_safe(&self) -> bool {
        self.concurrent_safe
    }
}
