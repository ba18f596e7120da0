//! Full-batch gradient descent for the fusion head.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{backward, batch_loss, FusionConfig, FusionError, FusionWeights, ModalEmbeddings, ParamGroup, Sample, N_EMOTIONS, TENSORS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, trace: Vec<f64> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    /// Multiplier on `lr` per parameter group; missing groups use 1.0.
    #[serde(default)]
    pub group_lr_scale: BTreeMap<ParamGroup, f64>,
}

impl TrainHyper {
    pub fn new(lr: f64, epochs: usize) -> Self {
        TrainHyper { lr, epochs, group_lr_scale: BTreeMap::new() }
    }

    pub fn with_scale(mut self, group: ParamGroup, scale: f64) -> Self {
        self.group_lr_scale.insert(group, scale);
        self
    }

    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        self.lr * self.group_lr_scale.get(&group).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: FusionWeights,
    /// `loss_trace[e]` is the full-batch loss after `e` updates; length `epochs + 1`.
    pub loss_trace: Vec<f64>,
}

pub fn train_head(dataset: &[Sample], init: FusionWeights, hyper: &TrainHyper) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut weights = init;
    let mut trace = Vec::with_capacity(hyper.epochs + 1);
    for epoch in 0..hyper.epochs {
        let (loss, grad) = backward(dataset, &weights)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, trace });
        }
        for ((param, g), (_, group)) in weights.views_mut().into_iter().zip(grad.views()).zip(TENSORS) {
            let step = hyper.group_lr(group);
            if step != 0.0 {
                let mut param = param;
                param.zip_mut_with(&g, |p, &d| *p -= step * d);
            }
        }
    }
    let last = batch_loss(dataset, &weights)?;
    trace.push(last);
    if !last.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: hyper.epochs, trace });
    }
    Ok(TrainOutcome { weights, loss_trace: trace })
}

/// A seeded dataset whose labels are linearly recoverable from the visual
/// stream: every visual row is `g + noise` with the noise summing to zero over
/// time, and emotion `e` is present iff `g[e] > 0`. The other modalities are
/// pure noise. Requires `cfg.d_visual >= 6`.
pub fn separable_dataset(cfg: &FusionConfig, n: usize, seed: u64) -> Vec<Sample> {
    assert!(cfg.d_visual >= N_EMOTIONS, "visual width must cover the six latent directions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = [5usize, 6, 4];
    (0..n)
        .map(|_| {
            let mut latent = [0.0f64; N_EMOTIONS];
            for g in &mut latent {
                let mag = rng.random_range(0.3..1.0);
                *g = if rng.random_bool(0.5) { mag } else { -mag };
            }
            let mut visual = Array2::zeros((steps[0], cfg.d_visual));
            for d in 0..cfg.d_visual {
                let noise: Vec<f64> = (0..steps[0]).map(|_| rng.random_range(-0.5..0.5)).collect();
                let mean = noise.iter().sum::<f64>() / steps[0] as f64;
                for t in 0..steps[0] {
                    let base = if d < N_EMOTIONS { latent[d] } else { 0.0 };
                    visual[[t, d]] = base + noise[t] - mean;
                }
            }
            let mut noise = |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.5..0.5));
            let acoustic = noise(steps[1], cfg.d_acoustic);
            let textual = noise(steps[2], cfg.d_textual);
            Sample {
                embeddings: ModalEmbeddings { visual, acoustic, textual },
                labels: latent.map(|g| if g > 0.0 { 1.0 } else { 0.0 }),
            }
        })
        .collect()
}
