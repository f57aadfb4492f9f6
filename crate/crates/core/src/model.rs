//! Dense feed-forward classifiers with manual backpropagation.
//!
//! A [`ClassifierParams`] is a stack of affine layers with a rectifier between
//! consecutive layers and no activation after the last one; the last layer
//! emits one logit per class. A model without hidden layers is a linear
//! (multinomial logistic) classifier.
//!
//! Gradients are computed with respect to the logits first and then pushed
//! through the network by [`ClassifierParams::backward`]. This lets the
//! conformal objectives add their own logit-gradients to the classification
//! gradient before a single backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One affine layer: `out = weight · in + bias`, weight stored `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn uniform(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng)),
            bias: Array1::from_shape_simple_fn(out_dim, || dist.sample(rng)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }
}

/// Parameter gradients, one entry per layer, shape-matched to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    /// Flattened view in the same order as [`ClassifierParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Global L2 norm over every weight and bias.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Weights of a dense classifier plus its momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub layers: Vec<Layer>,
    momentum: Vec<Layer>,
}

/// Activations retained by [`ClassifierParams::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to every layer; `inputs[0]` is the feature batch.
    inputs: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ClassifierParams {
    /// Builds a network `input_dim → hidden… → num_classes` with weights and
    /// biases drawn uniformly from `±1/√fan_in`.
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let layers: Vec<Layer> = dims
            .windows(2)
            .map(|w| Layer::uniform(w[1], w[0], &mut rng))
            .collect();
        let momentum = layers
            .iter()
            .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
            .collect();
        Self { layers, momentum }
    }

    /// Wraps explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::Dimension("at least one layer required".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(ModelError::Dimension(format!(
                    "layer {i}: bias length {} != out dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(ModelError::Dimension(format!(
                    "layer {i} out {} != layer {} in {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        let momentum = layers
            .iter()
            .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
            .collect();
        Ok(Self { layers, momentum })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn momentum(&self) -> &[Layer] {
        &self.momentum
    }

    /// All weights then biases, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(ModelError::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.logits)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(ModelError::Dimension(format!(
                "input has {} features, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut cached = Vec::with_capacity(self.layers.len());
        let mut act = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            cached.push(act);
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            act = z;
        }
        Ok(ForwardCache {
            inputs: cached,
            logits: act,
        })
    }

    /// Backpropagates a logit-gradient `[n × K]` through the network.
    pub fn backward(&self, cache: &ForwardCache, dlogits: ArrayView2<f64>) -> Result<Gradients> {
        if dlogits.dim() != cache.logits.dim() {
            return Err(ModelError::Dimension(format!(
                "logit gradient {:?} != logits {:?}",
                dlogits.dim(),
                cache.logits.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut upstream = delta.dot(&layer.weight);
                // rectifier mask: the cached input of layer i is relu(z_{i-1})
                ndarray::Zip::from(&mut upstream)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = upstream;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Re-draws the final (logit) layer from `±1/√fan_in` and clears its
    /// momentum. Hidden layers are left untouched.
    pub fn reinit_final_layer(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.layers.len() - 1;
        let (out_dim, in_dim) = (self.layers[last].out_dim(), self.layers[last].in_dim());
        self.layers[last] = Layer::uniform(out_dim, in_dim, &mut rng);
        self.momentum[last] = Layer::zeros(out_dim, in_dim);
    }

    /// One SGD update with optional (Nesterov) momentum and a step-wise
    /// learning-rate schedule.
    ///
    /// Momentum follows the usual deep-learning convention
    /// `buf ← μ·buf + g`, and the step is `lr·buf` (or `lr·(g + μ·buf)` with
    /// Nesterov).
    pub fn sgd_step(
        &mut self,
        grads: &Gradients,
        config: &OptimizerConfig,
        epoch: usize,
        total_epochs: usize,
    ) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| !g.same_shape(l))
        {
            return Err(ModelError::Dimension(
                "gradients do not match parameter shapes".into(),
            ));
        }
        if let Some(layer) = grads
            .layers
            .iter()
            .position(|g| g.weight.iter().chain(g.bias.iter()).any(|v| !v.is_finite()))
        {
            return Err(ModelError::NonFiniteGradient { layer });
        }
        let lr = config.lr_at(epoch, total_epochs);
        let scale = match config.clip_norm {
            Some(c) if grads.norm() > c => c / grads.norm(),
            _ => 1.0,
        };
        let mu = config.momentum;
        for ((param, buf), grad) in self
            .layers
            .iter_mut()
            .zip(self.momentum.iter_mut())
            .zip(&grads.layers)
        {
            apply_update(param.weight.view_mut(), buf.weight.view_mut(), grad.weight.view(), scale, lr, mu, config.nesterov);
            apply_update(param.bias.view_mut(), buf.bias.view_mut(), grad.bias.view(), scale, lr, mu, config.nesterov);
        }
        Ok(())
    }
}

fn apply_update<D: ndarray::Dimension>(
    mut param: ndarray::ArrayViewMut<f64, D>,
    mut buf: ndarray::ArrayViewMut<f64, D>,
    grad: ndarray::ArrayView<f64, D>,
    scale: f64,
    lr: f64,
    mu: f64,
    nesterov: bool,
) {
    if mu == 0.0 {
        param.zip_mut_with(&grad, |p, &g| *p -= lr * scale * g);
        return;
    }
    ndarray::Zip::from(&mut param)
        .and(&mut buf)
        .and(&grad)
        .for_each(|p, b, &g| {
            let g = scale * g;
            *b = mu * *b + g;
            let step = if nesterov { g + mu * *b } else { *b };
            *p -= lr * step;
        });
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

/// Classification loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `−(1 − p_y)^γ · log p_y`.
    Focal { gamma: f64 },
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(ModelError::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean classification loss over the batch and its gradient wrt the logits.
pub fn classification_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    kind: LossKind,
) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    check_labels(labels, n, k)?;
    let logp = log_softmax(logits);
    let mut grad = logp.mapv(f64::exp);
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let lp = logp[[i, y]];
        match kind {
            LossKind::CrossEntropy => {
                total -= lp;
                let mut row = grad.row_mut(i);
                row[y] -= 1.0;
                row.mapv_inplace(|v| v * inv_n);
            }
            LossKind::Focal { gamma } => {
                let p = lp.exp();
                let one_minus = (1.0 - p).max(0.0);
                let weight = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
                total -= weight * lp;
                // dL/dp, then dp/dz_j = p (δ_jy − p_j)
                let dweight = if gamma == 0.0 || one_minus == 0.0 {
                    0.0
                } else {
                    gamma * one_minus.powf(gamma - 1.0) * lp
                };
                let dl_dp = dweight - weight / p;
                let mut row = grad.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    *v = dl_dp * p * (delta - *v) * inv_n;
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Classification loss on a batch and the parameter gradients.
///
/// When `upstream` is given, the returned gradients are backpropagated from
/// that logit-gradient instead of the classification loss; the loss value is
/// still the classification loss of the batch.
pub fn loss_and_grad(
    params: &ClassifierParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    kind: LossKind,
    upstream: Option<ArrayView2<f64>>,
) -> Result<(f64, Gradients)> {
    if features.nrows() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let cache = params.forward_cached(features)?;
    let (loss, dlogits) = classification_loss(cache.logits.view(), labels, kind)?;
    let grads = match upstream {
        Some(up) => params.backward(&cache, up)?,
        None => params.backward(&cache, dlogits.view())?,
    };
    Ok((loss, grads))
}

/// SGD hyper-parameters and the step-wise learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Fractions of the total epoch count at which the rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    /// Rescale the gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            nesterov: true,
            milestones: vec![0.4, 0.6, 0.8],
            decay: 0.1,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn plain(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            momentum: 0.0,
            nesterov: false,
            milestones: Vec::new(),
            decay: 1.0,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(ModelError::InvalidConfig(format!("clip_norm must be positive, got {c}")));
            }
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m < 1.0) {
                return Err(ModelError::InvalidConfig(format!(
                    "milestones must be strictly increasing in (0, 1): {:?}",
                    self.milestones
                )));
            }
            prev = m;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * total_epochs as f64)
            .count();
        self.learning_rate * self.decay.powi(passed as i32)
    }
}
