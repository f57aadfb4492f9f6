//! Conformal training losses.
//!
//! Training scores are negative log-probabilities `s_iy = −log p_iy`. For the
//! conformal objectives every mini-batch is split into a calibration half,
//! whose true-label scores give the smooth threshold `q`, and a prediction
//! half on which soft set sizes and the classification loss are evaluated.
//! Gradients flow through both halves.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alm::{penalty, penalty_prime, AlmError, AlmState, PenaltyKind};
use crate::model::{classification_loss, log_softmax, ClassifierParams, Gradients, LossKind, ModelError};
use crate::scores::{sigmoid, smooth_set_size_with_grad, SmoothingConfig, SoftSizes};
use crate::smoothsort::{smooth_quantile, SmoothSortError};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("batch of {0} examples cannot be split")]
    BatchTooSmall(usize),

    #[error("split fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),

    #[error("invalid size-loss configuration: {0}")]
    InvalidConfig(String),

    #[error("{weights} class weights for {classes} classes")]
    WeightCount { weights: usize, classes: usize },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Quantile(#[from] SmoothSortError),

    #[error(transparent)]
    Alm(#[from] AlmError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Positions of the calibration and prediction halves of a mini-batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSplit {
    pub cal_indices: Vec<usize>,
    pub pred_indices: Vec<usize>,
}

/// Random split of `0..n` with `|cal| = round(fraction·n)` clamped to `[1, n−1]`.
pub fn split_batch<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<BatchSplit> {
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall(n));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ObjectiveError::InvalidFraction(fraction));
    }
    let n_cal = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let pred_indices = idx.split_off(n_cal);
    Ok(BatchSplit {
        cal_indices: idx,
        pred_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeLossConfig {
    /// Target set size η.
    pub eta: f64,
    /// Mis-coverage used for the in-batch threshold.
    pub alpha_train: f64,
    pub smoothing: SmoothingConfig,
}

impl Default for SizeLossConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            alpha_train: 0.01,
            smoothing: SmoothingConfig::default(),
        }
    }
}

impl SizeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("eta = {}", self.eta)));
        }
        if !(self.alpha_train > 0.0 && self.alpha_train < 1.0) {
            return Err(ObjectiveError::InvalidConfig(format!("alpha_train = {}", self.alpha_train)));
        }
        self.smoothing
            .validate()
            .map_err(|e| ObjectiveError::InvalidConfig(e.to_string()))
    }
}

/// A loss value with its gradients wrt the score matrix and the threshold.
#[derive(Debug, Clone)]
pub struct ScoreLoss {
    pub value: f64,
    pub d_scores: Array2<f64>,
    pub d_threshold: f64,
}

/// Mean hinge `max(0, size_i − η)` of the soft sizes.
pub fn conftr_size_loss(scores: ArrayView2<f64>, q: f64, cfg: &SizeLossConfig) -> ScoreLoss {
    let n = scores.nrows().max(1) as f64;
    let soft = smooth_set_size_with_grad(scores, q, &cfg.smoothing);
    let mut value = 0.0;
    let mut d_scores = soft.d_scores;
    let mut d_threshold = 0.0;
    for (i, mut row) in d_scores.rows_mut().into_iter().enumerate() {
        let excess = soft.sizes[i] - cfg.eta;
        if excess > 0.0 {
            value += excess;
            row.mapv_inplace(|v| v / n);
            d_threshold += soft.d_threshold[i] / n;
        } else {
            row.fill(0.0);
        }
    }
    ScoreLoss {
        value: value / n,
        d_scores,
        d_threshold,
    }
}

/// Per-class mean soft sizes `d̂_k` of a prediction half.
#[derive(Debug, Clone)]
pub struct ClasswiseTerms {
    /// `None` for classes absent from the batch.
    pub d_hat: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub labels: Vec<usize>,
    pub soft: SoftSizes,
}

impl ClasswiseTerms {
    /// Chain `∂L/∂d̂_k` back to the scores and the threshold.
    pub fn backprop(&self, d_dhat: &[f64]) -> (Array2<f64>, f64) {
        let mut d_scores = self.soft.d_scores.clone();
        let mut d_threshold = 0.0;
        for (i, mut row) in d_scores.rows_mut().into_iter().enumerate() {
            let y = self.labels[i];
            let w = d_dhat[y] / self.counts[y] as f64;
            row.mapv_inplace(|v| v * w);
            d_threshold += w * self.soft.d_threshold[i];
        }
        (d_scores, d_threshold)
    }
}

pub fn classwise_size_terms(
    scores: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    q: f64,
    cfg: &SizeLossConfig,
) -> Result<ClasswiseTerms> {
    if labels.len() != scores.nrows() {
        return Err(ModelError::Dimension(format!("{} labels for {} score rows", labels.len(), scores.nrows())).into());
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: num_classes,
        }
        .into());
    }
    let soft = smooth_set_size_with_grad(scores, q, &cfg.smoothing);
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&y, &size) in labels.iter().zip(soft.sizes.iter()) {
        sums[y] += size;
        counts[y] += 1;
    }
    let d_hat = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { None } else { Some(s / c as f64) })
        .collect();
    Ok(ClasswiseTerms {
        d_hat,
        counts,
        labels: labels.to_vec(),
        soft,
    })
}

/// `Σ_k P(d̂_k/η − 1, λ_k, ρ_k)` over classes with an estimate, and `∂/∂d̂_k`.
pub fn cact_loss(d_hat: &[Option<f64>], alm: &AlmState, kind: PenaltyKind) -> Result<(f64, Vec<f64>)> {
    if d_hat.len() != alm.num_classes() {
        return Err(AlmError::Length {
            expected: alm.num_classes(),
            got: d_hat.len(),
        }
        .into());
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; d_hat.len()];
    for (k, d) in d_hat.iter().enumerate() {
        if let Some(d) = d {
            let z = alm.normalized(*d);
            total += penalty(kind, z, alm.lambda[k], alm.rho[k])?;
            grad[k] = penalty_prime(kind, z, alm.lambda[k], alm.rho[k])? / alm.eta;
        }
    }
    Ok((total, grad))
}

/// `(1/n) Σ_y w_y Σ_{i∈I_y} max(0, size_i − η)`: the hinge size loss with a
/// fixed weight per class.
pub fn classwise_hinge_loss(
    scores: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    q: f64,
    cfg: &SizeLossConfig,
) -> ScoreLoss {
    let n = scores.nrows().max(1) as f64;
    let soft = smooth_set_size_with_grad(scores, q, &cfg.smoothing);
    let mut value = 0.0;
    let mut d_scores = soft.d_scores;
    let mut d_threshold = 0.0;
    for (i, mut row) in d_scores.rows_mut().into_iter().enumerate() {
        let w = weights[labels[i]];
        let excess = soft.sizes[i] - cfg.eta;
        if excess > 0.0 {
            value += w * excess;
            row.mapv_inplace(|v| v * w / n);
            d_threshold += w * soft.d_threshold[i] / n;
        } else {
            row.fill(0.0);
        }
    }
    ScoreLoss {
        value: value / n,
        d_scores,
        d_threshold,
    }
}

/// Number of grid points for the smoothed CUT supremum.
pub const CUT_GRID: usize = 101;

fn clamp_unit(scores: &[f64]) -> Vec<f64> {
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        log::warn!("CUT scores outside [0, 1] were clamped");
    }
    scores.iter().map(|s| s.clamp(0.0, 1.0)).collect()
}

/// Kolmogorov–Smirnov distance of the empirical CDF of `scores` from
/// Uniform(0, 1), evaluated exactly on both sides of every score.
pub fn cut_loss(scores: &[f64]) -> f64 {
    let mut s = clamp_unit(scores);
    if s.is_empty() {
        return 0.0;
    }
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Smoothed CUT loss: `max_g |F̂(w_g) − w_g|` on a fixed grid with sigmoid
/// indicators, and its subgradient wrt the scores.
pub fn cut_loss_smooth(scores: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let s = clamp_unit(scores);
    let n = s.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for g in 0..CUT_GRID {
        let w = g as f64 / (CUT_GRID - 1) as f64;
        let f: f64 = s.iter().map(|&v| sigmoid((w - v) / temperature)).sum::<f64>() / n as f64;
        let dev = f - w;
        if dev.abs() > best.0 {
            best = (dev.abs(), w, dev.signum());
        }
    }
    let (value, w, sign) = best;
    let grad = scores
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return 0.0;
            }
            let sig = sigmoid((w - v) / temperature);
            -sign * sig * (1.0 - sig) / (temperature * n as f64)
        })
        .collect();
    (value, grad)
}

/// Objective selector for one training step.
#[derive(Debug, Clone, Copy)]
pub enum TrainingObjective<'a> {
    /// Classification loss only.
    Classification,
    /// Classification plus `weight` × the marginal size loss.
    ConfTr { weight: f64 },
    /// Classification plus `weight` × the smoothed CUT loss.
    Cut { weight: f64 },
    /// Classification plus the per-class penalty sum.
    Cact { alm: &'a AlmState, penalty: PenaltyKind },
    /// Classification plus the hinge size loss with fixed class weights.
    Classwise { weights: &'a [f64] },
}

impl TrainingObjective<'_> {
    pub fn needs_split(&self) -> bool {
        matches!(
            self,
            TrainingObjective::ConfTr { .. } | TrainingObjective::Cact { .. } | TrainingObjective::Classwise { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub loss_kind: LossKind,
    pub size: SizeLossConfig,
    /// Fraction of each batch used as the calibration half.
    pub split_fraction: f64,
    /// Compute the classification loss on the prediction half only.
    pub cls_on_pred_only: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::CrossEntropy,
            size: SizeLossConfig::default(),
            split_fraction: 0.5,
            cls_on_pred_only: true,
        }
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub conformal: f64,
    /// Smooth threshold of the calibration half.
    pub threshold: Option<f64>,
    /// Per-class mean soft sizes on the prediction half.
    pub d_hat: Vec<Option<f64>>,
}

/// `dL/dz_ij = p_ij Σ_y G_iy − G_ij` for `s = −log softmax(z)`.
fn neg_log_prob_backward(probs: ArrayView1<f64>, g: ArrayView1<f64>, mut out: ndarray::ArrayViewMut1<f64>) {
    let total = g.sum();
    for j in 0..probs.len() {
        out[j] += probs[j] * total - g[j];
    }
}

/// Loss and parameter gradients of one mini-batch for a fixed split.
pub fn total_training_loss_with_split(
    params: &ClassifierParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    objective: &TrainingObjective,
    cfg: &ObjectiveConfig,
    split: &BatchSplit,
) -> Result<(LossBreakdown, Gradients)> {
    let n = features.nrows();
    if n == 0 {
        return Err(ModelError::EmptyBatch.into());
    }
    if labels.len() != n {
        return Err(ModelError::Dimension(format!("{} labels for {n} rows", labels.len())).into());
    }
    let k = params.num_classes();
    let cache = params.forward_cached(features)?;
    let logits = cache.logits.view();
    let mut dlogits = Array2::<f64>::zeros((n, k));
    let mut out = LossBreakdown::default();

    let conformal = objective.needs_split();
    let cls_rows: Vec<usize> = if conformal && cfg.cls_on_pred_only {
        split.pred_indices.clone()
    } else {
        (0..n).collect()
    };
    let cls_labels: Vec<usize> = cls_rows.iter().map(|&i| labels[i]).collect();
    let (cls, d_cls) = classification_loss(logits.select(Axis(0), &cls_rows).view(), &cls_labels, cfg.loss_kind)?;
    for (r, &i) in cls_rows.iter().enumerate() {
        let mut row = dlogits.row_mut(i);
        row += &d_cls.row(r);
    }
    out.classification = cls;

    let logp = log_softmax(logits);
    let probs = logp.mapv(f64::exp);

    match objective {
        TrainingObjective::Classification => {}
        TrainingObjective::Cut { weight } => {
            let thr: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| 1.0 - probs[[i, y]]).collect();
            let (value, grad) = cut_loss_smooth(&thr, cfg.size.smoothing.temperature);
            out.conformal = weight * value;
            // s_i = 1 − p_iy ⇒ ∂s_i/∂z_ij = p_iy (p_ij − δ_yj)
            for (i, &y) in labels.iter().enumerate() {
                let g = weight * grad[i] * probs[[i, y]];
                for j in 0..k {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    dlogits[[i, j]] += g * (probs[[i, j]] - delta);
                }
            }
        }
        TrainingObjective::ConfTr { .. } | TrainingObjective::Cact { .. } | TrainingObjective::Classwise { .. } => {
            cfg.size.validate()?;
            if split.cal_indices.is_empty() || split.pred_indices.is_empty() {
                return Err(ObjectiveError::BatchTooSmall(n));
            }
            let cal_scores: Vec<f64> = split.cal_indices.iter().map(|&i| -logp[[i, labels[i]]]).collect();
            let (q, dq_ds) = smooth_quantile(&cal_scores, cfg.size.alpha_train, cfg.size.smoothing.steepness)?;
            out.threshold = Some(q);
            let pred_scores = logp.select(Axis(0), &split.pred_indices).mapv(|v| -v);
            let pred_labels: Vec<usize> = split.pred_indices.iter().map(|&i| labels[i]).collect();
            let terms = classwise_size_terms(pred_scores.view(), &pred_labels, k, q, &cfg.size)?;
            out.d_hat = terms.d_hat.clone();

            let (value, d_scores, d_q) = match objective {
                TrainingObjective::ConfTr { weight } => {
                    let l = conftr_size_loss(pred_scores.view(), q, &cfg.size);
                    (weight * l.value, l.d_scores * *weight, weight * l.d_threshold)
                }
                TrainingObjective::Classwise { weights } => {
                    if weights.len() != k {
                        return Err(ObjectiveError::WeightCount {
                            weights: weights.len(),
                            classes: k,
                        });
                    }
                    let l = classwise_hinge_loss(pred_scores.view(), &pred_labels, weights, q, &cfg.size);
                    (l.value, l.d_scores, l.d_threshold)
                }
                TrainingObjective::Cact { alm, penalty } => {
                    let (value, d_dhat) = cact_loss(&terms.d_hat, alm, *penalty)?;
                    let (d_scores, d_q) = terms.backprop(&d_dhat);
                    (value, d_scores, d_q)
                }
                _ => unreachable!(),
            };
            out.conformal = value;

            for (r, &i) in split.pred_indices.iter().enumerate() {
                neg_log_prob_backward(probs.row(i), d_scores.row(r), dlogits.row_mut(i));
            }
            // cal rows: only the true-label score enters the quantile
            for (c, &i) in split.cal_indices.iter().enumerate() {
                let g = d_q * dq_ds[c];
                let y = labels[i];
                for j in 0..k {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    dlogits[[i, j]] += g * (probs[[i, j]] - delta);
                }
            }
        }
    }
    out.total = out.classification + out.conformal;
    let grads = params.backward(&cache, dlogits.view())?;
    Ok((out, grads))
}

/// Loss and gradients of one mini-batch; conformal objectives draw a fresh
/// calibration / prediction split from `rng`.
pub fn total_training_loss<R: Rng + ?Sized>(
    params: &ClassifierParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    objective: &TrainingObjective,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Gradients)> {
    let split = if objective.needs_split() {
        split_batch(features.nrows(), cfg.split_fraction, rng)?
    } else {
        BatchSplit {
            cal_indices: Vec::new(),
            pred_indices: (0..features.nrows()).collect(),
        }
    };
    total_training_loss_with_split(params, features, labels, objective, cfg, &split)
}
