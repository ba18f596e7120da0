//! Late-fusion classification head.
//!
//! For each modality: a "same"-padded 1D convolution over time, then the mean
//! over time. The three pooled vectors are concatenated and passed through
//! `linear -> relu -> linear -> sigmoid`, one independent probability per
//! emotion. Training uses mean binary cross-entropy; see [`backward`].

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EmbeddingSeq;

pub const N_EMOTIONS: usize = 6;
pub const EMOTIONS: [&str; N_EMOTIONS] = ["anger", "disgust", "fear", "happiness", "sadness", "surprise"];

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
}

fn mismatch(msg: impl Into<String>) -> FusionError {
    FusionError::ShapeMismatch(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Acoustic, Modality::Textual];

    pub fn key(self) -> &'static str {
        match self {
            Modality::Visual => "vis",
            Modality::Acoustic => "aco",
            Modality::Textual => "txt",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Learning-rate groups for the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "conv.vis")]
    ConvVisual,
    #[serde(rename = "conv.aco")]
    ConvAcoustic,
    #[serde(rename = "conv.txt")]
    ConvTextual,
    #[serde(rename = "lin1")]
    Linear1,
    #[serde(rename = "lin2")]
    Linear2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::ConvVisual, ParamGroup::ConvAcoustic, ParamGroup::ConvTextual, ParamGroup::Linear1, ParamGroup::Linear2];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ConvVisual => "conv.vis",
            ParamGroup::ConvAcoustic => "conv.aco",
            ParamGroup::ConvTextual => "conv.txt",
            ParamGroup::Linear1 => "lin1",
            ParamGroup::Linear2 => "lin2",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == name)
    }
}

/// Archive names of the head's tensors, in canonical order, with their group.
pub const TENSORS: [(&str, ParamGroup); 10] = [
    ("fus.conv.vis.w", ParamGroup::ConvVisual),
    ("fus.conv.vis.b", ParamGroup::ConvVisual),
    ("fus.conv.aco.w", ParamGroup::ConvAcoustic),
    ("fus.conv.aco.b", ParamGroup::ConvAcoustic),
    ("fus.conv.txt.w", ParamGroup::ConvTextual),
    ("fus.conv.txt.b", ParamGroup::ConvTextual),
    ("fus.lin1.w", ParamGroup::Linear1),
    ("fus.lin1.b", ParamGroup::Linear1),
    ("fus.lin2.w", ParamGroup::Linear2),
    ("fus.lin2.b", ParamGroup::Linear2),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub d_textual: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub n_emotions: usize,
    pub emotions: Vec<String>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::with_dims(512, 768, 768, 128, 3, 256)
    }
}

impl FusionConfig {
    pub fn with_dims(d_visual: usize, d_acoustic: usize, d_textual: usize, conv_channels: usize, kernel: usize, hidden: usize) -> Self {
        FusionConfig {
            d_visual,
            d_acoustic,
            d_textual,
            conv_channels,
            kernel,
            hidden,
            n_emotions: N_EMOTIONS,
            emotions: EMOTIONS.iter().map(|e| e.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.conv_channels == 0 || self.hidden == 0 {
            return bad("conv_channels and hidden must be positive");
        }
        if self.d_visual == 0 || self.d_acoustic == 0 || self.d_textual == 0 {
            return bad("modality dims must be positive");
        }
        if self.n_emotions != N_EMOTIONS || self.emotions.iter().map(String::as_str).ne(EMOTIONS) {
            return bad("emotion set must be anger, disgust, fear, happiness, sadness, surprise in that order");
        }
        Ok(())
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.d_visual,
            Modality::Acoustic => self.d_acoustic,
            Modality::Textual => self.d_textual,
        }
    }

    /// Expected shape of every tensor in [`TENSORS`] order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, k, h) = (self.conv_channels, self.kernel, self.hidden);
        let mut shapes = Vec::with_capacity(TENSORS.len());
        for m in Modality::ALL {
            shapes.push((TENSORS[2 * m.index()].0, vec![c, self.dim(m), k]));
            shapes.push((TENSORS[2 * m.index() + 1].0, vec![c]));
        }
        shapes.push(("fus.lin1.w", vec![h, 3 * c]));
        shapes.push(("fus.lin1.b", vec![h]));
        shapes.push(("fus.lin2.w", vec![self.n_emotions, h]));
        shapes.push(("fus.lin2.b", vec![self.n_emotions]));
        shapes
    }
}

/// All learned parameters of the head. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// Per modality, `C x D_m x k`.
    pub conv_w: [Array3<f64>; 3],
    pub conv_b: [Array1<f64>; 3],
    /// `H x 3C`
    pub lin1_w: Array2<f64>,
    pub lin1_b: Array1<f64>,
    /// `6 x H`
    pub lin2_w: Array2<f64>,
    pub lin2_b: Array1<f64>,
}

impl FusionWeights {
    pub fn zeros(cfg: &FusionConfig) -> Self {
        let (c, k, h, e) = (cfg.conv_channels, cfg.kernel, cfg.hidden, cfg.n_emotions);
        FusionWeights {
            conv_w: Modality::ALL.map(|m| Array3::zeros((c, cfg.dim(m), k))),
            conv_b: Modality::ALL.map(|_| Array1::zeros(c)),
            lin1_w: Array2::zeros((h, 3 * c)),
            lin1_b: Array1::zeros(h),
            lin2_w: Array2::zeros((e, h)),
            lin2_b: Array1::zeros(e),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights, zero biases.
    pub fn random<R: Rng>(cfg: &FusionConfig, rng: &mut R) -> Self {
        let mut w = FusionWeights::zeros(cfg);
        for m in Modality::ALL {
            let bound = 1.0 / ((cfg.dim(m) * cfg.kernel) as f64).sqrt();
            w.conv_w[m.index()].mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        let b1 = 1.0 / ((3 * cfg.conv_channels) as f64).sqrt();
        w.lin1_w.mapv_inplace(|_| rng.random_range(-b1..b1));
        let b2 = 1.0 / (cfg.hidden as f64).sqrt();
        w.lin2_w.mapv_inplace(|_| rng.random_range(-b2..b2));
        w
    }

    /// Views in [`TENSORS`] order.
    pub fn views(&self) -> [ArrayViewD<'_, f64>; 10] {
        let [cv, ca, ct] = &self.conv_w;
        let [bv, ba, bt] = &self.conv_b;
        [
            cv.view().into_dyn(),
            bv.view().into_dyn(),
            ca.view().into_dyn(),
            ba.view().into_dyn(),
            ct.view().into_dyn(),
            bt.view().into_dyn(),
            self.lin1_w.view().into_dyn(),
            self.lin1_b.view().into_dyn(),
            self.lin2_w.view().into_dyn(),
            self.lin2_b.view().into_dyn(),
        ]
    }

    pub fn views_mut(&mut self) -> [ArrayViewMutD<'_, f64>; 10] {
        let [cv, ca, ct] = &mut self.conv_w;
        let [bv, ba, bt] = &mut self.conv_b;
        [
            cv.view_mut().into_dyn(),
            bv.view_mut().into_dyn(),
            ca.view_mut().into_dyn(),
            ba.view_mut().into_dyn(),
            ct.view_mut().into_dyn(),
            bt.view_mut().into_dyn(),
            self.lin1_w.view_mut().into_dyn(),
            self.lin1_b.view_mut().into_dyn(),
            self.lin2_w.view_mut().into_dyn(),
            self.lin2_b.view_mut().into_dyn(),
        ]
    }

    /// Checks every tensor against `cfg`.
    pub fn check(&self, cfg: &FusionConfig) -> Result<(), FusionError> {
        for ((name, want), view) in cfg.tensor_shapes().into_iter().zip(self.views()) {
            if view.shape() != want.as_slice() {
                return Err(mismatch(format!("{name}: expected {want:?}, got {:?}", view.shape())));
            }
            if view.iter().any(|v| !v.is_finite()) {
                return Err(mismatch(format!("{name}: non-finite value")));
            }
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the archive's storage precision.
    pub fn round_to_f32(&mut self) {
        for mut v in self.views_mut() {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    fn conv_channels(&self) -> usize {
        self.conv_b[0].len()
    }
}

/// Embedding sequences for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalEmbeddings {
    pub visual: EmbeddingSeq,
    pub acoustic: EmbeddingSeq,
    pub textual: EmbeddingSeq,
}

impl ModalEmbeddings {
    pub fn get(&self, m: Modality) -> &EmbeddingSeq {
        match m {
            Modality::Visual => &self.visual,
            Modality::Acoustic => &self.acoustic,
            Modality::Textual => &self.textual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; N_EMOTIONS],
    pub probs: [f64; N_EMOTIONS],
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[t, c] = b[c] + sum_{d, j} w[c, d, j] * x[t + j - (k-1)/2, d]`, rows
/// outside `x` read as zero.
pub fn conv1d_same(x: ArrayView2<f64>, w: ArrayView3<f64>, b: ArrayView1<f64>) -> Result<Array2<f64>, FusionError> {
    let (t_len, d) = x.dim();
    let (c, dw, k) = w.dim();
    if dw != d || b.len() != c {
        return Err(mismatch(format!("conv: input width {d}, kernel {:?}, bias {}", w.dim(), b.len())));
    }
    if k % 2 == 0 {
        return Err(mismatch(format!("conv kernel size {k} is even")));
    }
    let half = (k - 1) / 2;
    let mut out = Array2::from_shape_fn((t_len, c), |(_, ci)| b[ci]);
    for j in 0..k {
        let Some((lo, hi)) = tap_range(t_len, j, half) else { continue };
        let src = x.slice(s![lo + j - half..hi + j - half, ..]);
        let wj = w.slice(s![.., .., j]);
        let mut dst = out.slice_mut(s![lo..hi, ..]);
        dst += &src.dot(&wj.t());
    }
    Ok(out)
}

/// Output rows `[lo, hi)` for which tap `j` reads inside the sequence.
fn tap_range(t_len: usize, j: usize, half: usize) -> Option<(usize, usize)> {
    let lo = half.saturating_sub(j);
    let hi = (t_len + half).saturating_sub(j).min(t_len);
    (lo < hi).then_some((lo, hi))
}

pub fn temporal_mean(x: ArrayView2<f64>) -> Result<Array1<f64>, FusionError> {
    x.mean_axis(ndarray::Axis(0)).ok_or(FusionError::EmptySequence)
}

struct Activations {
    z: Array1<f64>,
    pre1: Array1<f64>,
    h: Array1<f64>,
    prediction: Prediction,
}

fn forward_full(e: &ModalEmbeddings, w: &FusionWeights) -> Result<Activations, FusionError> {
    let c = w.conv_channels();
    let mut z = Array1::zeros(3 * c);
    for m in Modality::ALL {
        let i = m.index();
        let conv = conv1d_same(e.get(m).view(), w.conv_w[i].view(), w.conv_b[i].view())
            .map_err(|err| mismatch(format!("{} {err}", m.key())))?;
        z.slice_mut(s![i * c..(i + 1) * c]).assign(&temporal_mean(conv.view())?);
    }
    if w.lin1_w.ncols() != z.len() || w.lin2_w.ncols() != w.lin1_w.nrows() || w.lin2_w.nrows() != N_EMOTIONS {
        return Err(mismatch("linear layer shapes"));
    }
    let pre1 = w.lin1_w.dot(&z) + &w.lin1_b;
    let h = pre1.mapv(|v| if v < 0.0 { 0.0 } else { v });
    let logits_v = w.lin2_w.dot(&h) + &w.lin2_b;
    let mut logits = [0.0; N_EMOTIONS];
    logits.iter_mut().zip(logits_v.iter()).for_each(|(o, v)| *o = *v);
    let probs = logits.map(sigmoid);
    Ok(Activations { z, pre1, h, prediction: Prediction { logits, probs } })
}

pub fn forward(e: &ModalEmbeddings, w: &FusionWeights) -> Result<Prediction, FusionError> {
    Ok(forward_full(e, w)?.prediction)
}

/// Mean over emotions of the binary cross-entropy, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64; N_EMOTIONS], labels: &[f64; N_EMOTIONS]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / N_EMOTIONS as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub embeddings: ModalEmbeddings,
    pub labels: [f64; N_EMOTIONS],
}

/// Mean batch BCE and its exact gradient with respect to every head tensor.
///
/// The gradient is that of the unclamped loss; the two agree wherever no
/// probability is within 1e-7 of 0 or 1.
pub fn backward(batch: &[Sample], w: &FusionWeights) -> Result<(f64, FusionWeights), FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptySequence);
    }
    let c = w.conv_channels();
    let n = batch.len() as f64;
    let mut grad = FusionWeights {
        conv_w: w.conv_w.clone().map(|a| Array3::zeros(a.dim())),
        conv_b: w.conv_b.clone().map(|a| Array1::zeros(a.dim())),
        lin1_w: Array2::zeros(w.lin1_w.dim()),
        lin1_b: Array1::zeros(w.lin1_b.dim()),
        lin2_w: Array2::zeros(w.lin2_w.dim()),
        lin2_b: Array1::zeros(w.lin2_b.dim()),
    };
    let mut loss = 0.0;
    for sample in batch {
        let act = forward_full(&sample.embeddings, w)?;
        let p = act.prediction.probs;
        loss += bce_loss(&p, &sample.labels);

        let dlogits = Array1::from_iter((0..N_EMOTIONS).map(|e| (p[e] - sample.labels[e]) / (N_EMOTIONS as f64 * n)));
        grad.lin2_b += &dlogits;
        grad.lin2_w += &outer(&dlogits, &act.h);
        let dh = w.lin2_w.t().dot(&dlogits);
        let dpre1 = Array1::from_iter(dh.iter().zip(act.pre1.iter()).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }));
        grad.lin1_b += &dpre1;
        grad.lin1_w += &outer(&dpre1, &act.z);
        let dz = w.lin1_w.t().dot(&dpre1);

        for m in Modality::ALL {
            let i = m.index();
            let x = sample.embeddings.get(m);
            let t_len = x.nrows();
            let df = dz.slice(s![i * c..(i + 1) * c]);
            grad.conv_b[i] += &df;
            let k = w.conv_w[i].dim().2;
            let half = (k - 1) / 2;
            for j in 0..k {
                let Some((lo, hi)) = tap_range(t_len, j, half) else { continue };
                // d mean_t out[t, c] / d w[c, d, j] = (1/T) sum_{t in [lo, hi)} x[t + j - half, d]
                let shifted = x.slice(s![lo + j - half..hi + j - half, ..]).sum_axis(ndarray::Axis(0)) / t_len as f64;
                let mut gj = grad.conv_w[i].slice_mut(s![.., .., j]);
                gj += &outer(&df.to_owned(), &shifted);
            }
        }
    }
    Ok((loss / n, grad))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(ndarray::Axis(1));
    let row = b.view().insert_axis(ndarray::Axis(0));
    col.dot(&row)
}

/// Mean batch BCE without gradients.
pub fn batch_loss(batch: &[Sample], w: &FusionWeights) -> Result<f64, FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptySequence);
    }
    let mut total = 0.0;
    for s in batch {
        total += bce_loss(&forward(&s.embeddings, w)?.probs, &s.labels);
    }
    Ok(total / batch.len() as f64)
}
