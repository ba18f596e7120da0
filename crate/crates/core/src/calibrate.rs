//! Per-emotion decision thresholds and evaluation metrics.
//!
//! An emotion is active when its probability is strictly above its threshold.
//! The same rule is used for calibration, evaluation, and at inference time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{EMOTIONS, N_EMOTIONS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("thresholds file {path}: {reason}")]
    BadThresholds { path: String, reason: String },
}

pub type Thresholds = [f64; N_EMOTIONS];

/// Indices of emotions whose probability is strictly above the threshold.
pub fn apply_thresholds(probs: &[f64; N_EMOTIONS], thresholds: &Thresholds) -> Vec<usize> {
    (0..N_EMOTIONS).filter(|&e| probs[e] > thresholds[e]).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn tally(pred: &[bool], label: &[bool]) -> Result<Self, MetricsError> {
        if pred.len() != label.len() {
            return Err(MetricsError::LengthMismatch(pred.len(), label.len()));
        }
        let mut c = Counts::default();
        for (&p, &l) in pred.iter().zip(label) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`, or 0 when nothing is positive on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// F1 with the roles of the classes swapped.
    pub fn f1_negative(&self) -> f64 {
        Counts { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }.f1()
    }
}

pub fn f1_binary(pred: &[bool], label: &[bool]) -> Result<f64, MetricsError> {
    Ok(Counts::tally(pred, label)?.f1())
}

/// 0.01, 0.02, ..., 0.99
pub fn threshold_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub thresholds: Thresholds,
    pub best_f1: [f64; N_EMOTIONS],
}

/// Best grid threshold for one emotion; ties go to the smallest threshold.
pub fn calibrate_column(probs: &[f64], labels: &[bool], grid: &[f64]) -> Result<(f64, f64), MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(probs.len(), labels.len()));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut pred = vec![false; probs.len()];
    for &t in grid {
        for (p, &q) in pred.iter_mut().zip(probs) {
            *p = q > t;
        }
        let f1 = f1_binary(&pred, labels)?;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    best.ok_or(MetricsError::Empty)
}

/// Independently picks, per emotion, the grid threshold maximizing F1 on
/// the given validation rows.
pub fn calibrate(probs: &[[f64; N_EMOTIONS]], labels: &[[bool; N_EMOTIONS]]) -> Result<CalibrationResult, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let grid = threshold_grid();
    let mut result = CalibrationResult { thresholds: [0.0; N_EMOTIONS], best_f1: [0.0; N_EMOTIONS] };
    for e in 0..N_EMOTIONS {
        let col: Vec<f64> = probs.iter().map(|r| r[e]).collect();
        let lab: Vec<bool> = labels.iter().map(|r| r[e]).collect();
        let (t, f1) = calibrate_column(&col, &lab, &grid)?;
        result.thresholds[e] = t;
        result.best_f1[e] = f1;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionMetrics {
    pub emotion: String,
    pub accuracy: f64,
    pub f1_positive: f64,
    pub f1_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_emotion: Vec<EmotionMetrics>,
    pub mean_accuracy: f64,
    pub mean_f1_positive: f64,
    pub mean_f1_weighted: f64,
}

impl EvalReport {
    /// The headline F1, support-weighted per emotion then averaged.
    pub fn f1(&self) -> f64 {
        self.mean_f1_weighted
    }
}

pub fn evaluate(
    probs: &[[f64; N_EMOTIONS]],
    labels: &[[bool; N_EMOTIONS]],
    thresholds: &Thresholds,
) -> Result<EvalReport, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = probs.len() as f64;
    let per_emotion: Vec<EmotionMetrics> = (0..N_EMOTIONS)
        .map(|e| {
            let pred: Vec<bool> = probs.iter().map(|r| r[e] > thresholds[e]).collect();
            let lab: Vec<bool> = labels.iter().map(|r| r[e]).collect();
            let c = Counts::tally(&pred, &lab).expect("equal lengths");
            let n_pos = (c.tp + c.fn_) as f64;
            let n_neg = (c.tn + c.fp) as f64;
            EmotionMetrics {
                emotion: EMOTIONS[e].to_string(),
                accuracy: (c.tp + c.tn) as f64 / n,
                f1_positive: c.f1(),
                f1_weighted: (n_pos * c.f1() + n_neg * c.f1_negative()) / n,
            }
        })
        .collect();
    let mean = |f: fn(&EmotionMetrics) -> f64| per_emotion.iter().map(f).sum::<f64>() / N_EMOTIONS as f64;
    Ok(EvalReport {
        mean_accuracy: mean(|m| m.accuracy),
        mean_f1_positive: mean(|m| m.f1_positive),
        mean_f1_weighted: mean(|m| m.f1_weighted),
        per_emotion,
    })
}

/// On-disk thresholds: `{"emotions": [...], "thresholds": [6 reals]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub emotions: Vec<String>,
    pub thresholds: Vec<f64>,
}

impl ThresholdsFile {
    pub fn new(thresholds: Thresholds) -> Self {
        ThresholdsFile { emotions: EMOTIONS.iter().map(|e| e.to_string()).collect(), thresholds: thresholds.to_vec() }
    }

    pub fn load(path: &Path) -> Result<Thresholds, MetricsError> {
        let bad = |reason: String| MetricsError::BadThresholds { path: path.display().to_string(), reason };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let file: ThresholdsFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if file.emotions.iter().map(String::as_str).ne(EMOTIONS) {
            return Err(bad(format!("emotion order must be {EMOTIONS:?}")));
        }
        let t: Thresholds = file.thresholds.as_slice().try_into().map_err(|_| bad("need 6 thresholds".into()))?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(bad("thresholds must be finite".into()));
        }
        Ok(t)
    }

    pub fn save(thresholds: &Thresholds, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(&ThresholdsFile::new(*thresholds)).expect("serializable");
        text.push('\n');
        fs::write(path, text)
    }
}
