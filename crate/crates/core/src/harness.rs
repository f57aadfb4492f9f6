//! Experiment orchestration: configuration, the class-adaptive training
//! driver, evaluation over calibration / test resamples, ablations and
//! plot-data emission.
//!
//! Every output of a run lives in `output_dir/run-<hash>` where `<hash>` is
//! derived from the resolved configuration, so a configuration fully
//! determines where (and what) gets written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alm::{penalty, AlmError, AlmState, HrState, PenaltyKind};
use crate::calibration::{
    calibrate_cluster, calibrate_label, calibrate_split, predict_sets, CalibrationError, ClusterConfig,
};
use crate::data::{
    load_csv, load_csv_with_labels, split_protocol, CsvSchema, DataError, DatasetManifest, GaussianMixture,
    ImbalanceSpec, LabeledDataset,
};
use crate::metrics::{aggregate, evaluate, AggregateReport, MetricsError};
use crate::model::{log_softmax, softmax, ClassifierParams, LossKind, ModelError, OptimizerConfig};
use crate::objectives::{
    total_training_loss, ObjectiveConfig, ObjectiveError, SizeLossConfig, TrainingObjective,
};
use crate::scores::{compute_scores, hard_set_size, ScoreError, ScoreKind, SmoothingConfig};
use crate::smoothsort::hard_quantile;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("config file: {0}")]
    TomlRead(#[from] toml::de::Error),

    #[error("config file: {0}")]
    TomlWrite(#[from] toml::ser::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{method} diverged at epoch {epoch} (non-finite loss)")]
    Divergence { method: String, epoch: usize, dump: String },

    #[error("no trained model at {0}")]
    MissingModel(PathBuf),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Objective(#[from] ObjectiveError),

    #[error(transparent)]
    Alm(#[from] AlmError),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),

    #[error(transparent)]
    Score(#[from] ScoreError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-entropy.
    Ce,
    /// Focal loss.
    Fl,
    /// Marginal size loss with a fixed weight.
    Conftr,
    /// Uniformity of the true-label THR scores.
    Cut,
    /// Per-class penalties with multipliers learned by the ALM updates.
    Cact,
    /// Per-class penalties with the heuristic multiplier rule.
    CactHr,
    /// Hinge size loss with fixed per-class weights.
    Classwise,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::Ce,
        Objective::Fl,
        Objective::Conftr,
        Objective::Cut,
        Objective::Cact,
        Objective::CactHr,
        Objective::Classwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Fl => "fl",
            Objective::Conftr => "conftr",
            Objective::Cut => "cut",
            Objective::Cact => "cact",
            Objective::CactHr => "cact-hr",
            Objective::Classwise => "classwise",
        }
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown objective `{s}`"))
    }
}

/// Source of the threshold used for the validation size estimates `d̂_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValThreshold {
    /// Hard conformal quantile of the validation true-label scores at `alpha_train`.
    Validation,
    /// Smooth threshold of the last training batch of the epoch.
    FrozenBatch,
}

/// Conformal calibration mode at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpMode {
    Split,
    Label,
    Cluster,
}

impl CpMode {
    pub fn name(self) -> &'static str {
        match self {
            CpMode::Split => "split",
            CpMode::Label => "label",
            CpMode::Cluster => "cluster",
        }
    }
}

/// Flat experiment configuration; every key has a default and unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // data
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub gamma: f64,
    /// Training count of the largest class.
    pub train_base_count: usize,
    /// Per-class size of the balanced pool that is split into val / cal / test.
    pub test_pool_per_class: usize,
    pub data_seed: u64,
    pub train_csv: Option<String>,
    pub test_csv: Option<String>,
    pub label_column: String,

    // model
    pub hidden: Vec<usize>,

    // objective
    pub objective: Objective,
    /// Methods trained by `plots` and `ablate`.
    pub methods: Vec<Objective>,
    /// "ce" or "focal"; the `fl` objective always uses focal.
    pub cls_loss: String,
    pub focal_gamma: f64,
    /// Weight of the ConfTr / CUT term.
    pub conformal_weight: f64,
    /// Fixed class weights of the `classwise` objective; defaults to `conformal_weight`.
    pub class_weights: Option<Vec<f64>>,
    pub penalty: PenaltyKind,
    pub lambda0: f64,
    pub rho0: f64,
    pub beta: f64,
    pub rho_period: usize,
    pub hr_lambda0: f64,
    pub hr_mu: f64,
    pub hr_tau: f64,
    /// Keep multipliers and penalty parameters at their initial values.
    pub freeze_multipliers: bool,
    pub val_threshold: ValThreshold,

    // size loss
    pub eta: f64,
    pub alpha_train: f64,
    pub temperature: f64,
    pub steepness: f64,
    pub split_fraction: f64,
    pub cls_on_pred_only: bool,

    // optimisation
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub milestones: Vec<f64>,
    pub decay: f64,
    /// Global gradient-norm clip shared by every method; off when absent.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pre-train with cross-entropy, re-initialise the logit layer, then train
    /// with the objective.
    pub finetune: bool,
    pub pretrain_epochs: usize,

    // evaluation
    pub alphas: Vec<f64>,
    pub scores: Vec<String>,
    pub cp_modes: Vec<CpMode>,
    pub randomized: bool,
    pub raps_lambda: f64,
    pub raps_k: usize,
    pub clusters: Option<usize>,
    pub cluster_min_count: Option<usize>,
    pub resamples: usize,
    pub topk: Vec<usize>,

    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 10,
            separation: 1.0,
            gamma: 0.1,
            train_base_count: 500,
            test_pool_per_class: 500,
            data_seed: 0,
            train_csv: None,
            test_csv: None,
            label_column: "label".into(),
            hidden: vec![64],
            objective: Objective::Cact,
            methods: vec![Objective::Ce, Objective::Conftr, Objective::Cact],
            cls_loss: "ce".into(),
            focal_gamma: 3.0,
            conformal_weight: 0.1,
            class_weights: None,
            penalty: PenaltyKind::Phr,
            lambda0: 1e-6,
            rho0: 1.0,
            beta: 1.2,
            rho_period: 10,
            hr_lambda0: 0.1,
            hr_mu: 1.1,
            hr_tau: 1.1,
            freeze_multipliers: false,
            val_threshold: ValThreshold::Validation,
            eta: 1.0,
            alpha_train: 0.01,
            temperature: 0.1,
            steepness: 10.0,
            split_fraction: 0.5,
            cls_on_pred_only: true,
            learning_rate: 0.05,
            momentum: 0.9,
            nesterov: true,
            milestones: vec![0.4, 0.6, 0.8],
            decay: 0.1,
            grad_clip: None,
            epochs: 50,
            batch_size: 500,
            finetune: false,
            pretrain_epochs: 20,
            alphas: vec![0.1],
            scores: vec!["thr".into(), "aps".into()],
            cp_modes: vec![CpMode::Split],
            randomized: true,
            raps_lambda: 0.01,
            raps_k: 5,
            clusters: None,
            cluster_min_count: None,
            resamples: 10,
            topk: vec![1, 3],
            seeds: vec![0],
            output_dir: "runs".into(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Apply `key=value` overrides; values use TOML syntax, bare words are
    /// taken as strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()?)?;
        for (key, raw) in overrides {
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.clone()),
            };
            table.insert(key.clone(), value);
        }
        let cfg: Self = toml::from_str(&toml::to_string(&table)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_csv.is_none() && (self.num_classes < 2 || self.dim < 2) {
            return Err(config_err("num_classes and dim must be at least 2"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.train_csv.is_some() != self.test_csv.is_some() {
            return Err(config_err("train_csv and test_csv must be given together"));
        }
        match self.cls_loss.as_str() {
            "ce" | "focal" => {}
            other => return Err(config_err(format!("cls_loss must be `ce` or `focal`, got `{other}`"))),
        }
        if self.focal_gamma < 0.0 {
            return Err(config_err("focal_gamma must be non-negative"));
        }
        if self.conformal_weight < 0.0 {
            return Err(config_err("conformal_weight must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(config_err("epochs must be positive and batch_size at least 2"));
        }
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(config_err("seeds and methods must be non-empty"));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) || self.alphas.is_empty() {
            return Err(config_err("alphas must be non-empty and lie in (0, 1)"));
        }
        if self.resamples == 0 {
            return Err(config_err("resamples must be positive"));
        }
        for s in &self.scores {
            self.score_kind(s)?;
        }
        if self.clusters == Some(0) {
            return Err(config_err("clusters must be at least 1"));
        }
        self.size_config().validate()?;
        self.optimizer().validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(config_err("split_fraction must lie in (0, 1)"));
        }
        AlmState::new(1, self.lambda0, self.rho0, self.beta, self.rho_period, self.eta.max(f64::MIN_POSITIVE))?;
        HrState::new(1, self.hr_lambda0, self.hr_mu, self.hr_tau)?;
        Ok(())
    }

    pub fn score_kind(&self, name: &str) -> Result<ScoreKind> {
        match name {
            "thr" => Ok(ScoreKind::Thr),
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps {
                lambda_reg: self.raps_lambda,
                k_reg: self.raps_k,
            }),
            other => Err(config_err(format!("unknown score `{other}`"))),
        }
    }

    pub fn size_config(&self) -> SizeLossConfig {
        SizeLossConfig {
            eta: self.eta,
            alpha_train: self.alpha_train,
            smoothing: SmoothingConfig {
                temperature: self.temperature,
                steepness: self.steepness,
            },
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            nesterov: self.nesterov,
            milestones: self.milestones.clone(),
            decay: self.decay,
            clip_norm: self.grad_clip,
        }
    }

    fn loss_kind(&self, method: Objective) -> LossKind {
        if method == Objective::Fl || self.cls_loss == "focal" {
            LossKind::Focal { gamma: self.focal_gamma }
        } else {
            LossKind::CrossEntropy
        }
    }

    /// First 12 hex digits of the SHA-256 of the resolved configuration.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        let mut hex = String::new();
        for b in digest.iter().take(6) {
            write!(hex, "{b:02x}").expect("write to string");
        }
        Ok(hex)
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(Path::new(&self.output_dir).join(format!("run-{}", self.fingerprint()?)))
    }
}

/// Training data and the three held-out splits.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub cal: LabeledDataset,
    pub test: LabeledDataset,
}

impl ExperimentData {
    pub fn manifest(&self, config: &ExperimentConfig) -> DatasetManifest {
        let counts = [
            ("train", &self.train),
            ("val", &self.val),
            ("cal", &self.cal),
            ("test", &self.test),
        ]
        .into_iter()
        .map(|(name, d)| (name.to_string(), d.class_counts()))
        .collect();
        DatasetManifest {
            seed: config.data_seed,
            gamma: config.gamma,
            num_classes: self.train.num_classes,
            dim: self.train.dim(),
            counts,
        }
    }
}

/// Build the training set and the val / cal / test splits.
///
/// Synthetic data: the class means come from `data_seed`; the long-tailed
/// training set and the balanced held-out pool are sampled independently, so
/// changing `gamma` leaves the held-out splits untouched.
pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let (train, pool) = match (&config.train_csv, &config.test_csv) {
        (Some(train), Some(test)) => {
            let schema = CsvSchema::new(&config.label_column);
            let (train, table) = load_csv(Path::new(train), &schema)?;
            let pool = load_csv_with_labels(Path::new(test), &schema, &table)?;
            (train, pool)
        }
        _ => {
            let seed = config.data_seed;
            let mixture = GaussianMixture::new(config.num_classes, config.dim, config.separation, seed)?;
            let spec = ImbalanceSpec {
                gamma: config.gamma,
                base_count: config.train_base_count,
            };
            let train = mixture.sample(&spec.counts(config.num_classes)?, seed.wrapping_add(1))?;
            let pool = mixture.sample(&vec![config.test_pool_per_class; config.num_classes], seed.wrapping_add(2))?;
            (train, pool)
        }
    };
    let splits = split_protocol(&pool, config.data_seed.wrapping_add(3))?;
    Ok(ExperimentData {
        train,
        val: splits.val,
        cal: splits.cal,
        test: splits.test,
    })
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub conformal_loss: f64,
    /// Multipliers used during this epoch.
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    /// Validation size estimates computed after the epoch.
    pub d_hat: Vec<Option<f64>>,
    pub val_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: Objective,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub method: Objective,
    pub seed: u64,
    pub params: ClassifierParams,
    pub log: RunLog,
}

/// `ceil(n / batch)` nearly equal chunks of a permutation.
fn chunks(order: &[usize], batch: usize) -> Vec<&[usize]> {
    let n = order.len();
    let count = n.div_ceil(batch).max(1);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for c in 0..count {
        let len = base + usize::from(c < extra);
        out.push(&order[start..start + len]);
        start += len;
    }
    out
}

/// Per-class mean hard set size on the validation split.
fn validation_sizes(
    params: &ClassifierParams,
    val: &LabeledDataset,
    config: &ExperimentConfig,
    frozen: Option<f64>,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if val.is_empty() {
        return Ok((vec![None; val.num_classes], None));
    }
    let scores = log_softmax(params.forward(val.features.view())?.view()).mapv(|v| -v);
    let q = match config.val_threshold {
        ValThreshold::Validation => {
            let true_scores: Vec<f64> = val.labels.iter().enumerate().map(|(i, &y)| scores[[i, y]]).collect();
            let q = hard_quantile(&true_scores, config.alpha_train);
            if q.is_finite() {
                Some(q)
            } else {
                log::warn!("validation split too small for alpha_train; using the last batch threshold");
                frozen
            }
        }
        ValThreshold::FrozenBatch => frozen,
    };
    let Some(q) = q else {
        return Ok((vec![None; val.num_classes], None));
    };
    let sizes = hard_set_size(scores.view(), q);
    let d_hat = val
        .class_index()
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                None
            } else {
                Some(idx.iter().map(|&i| sizes[i]).sum::<f64>() / idx.len() as f64)
            }
        })
        .collect();
    Ok((d_hat, Some(q)))
}

fn divergence(method: Objective, epoch: usize, alm: &AlmState, hr: &HrState, loss: f64) -> HarnessError {
    let dump = serde_json::json!({
        "method": method.name(),
        "epoch": epoch,
        "loss": loss.to_string(),
        "alm": alm,
        "hr": hr,
    })
    .to_string();
    HarnessError::Divergence {
        method: method.name().into(),
        epoch,
        dump,
    }
}

/// Train one model with `method`.
///
/// Per epoch: shuffle, run the mini-batch loop (split, smooth quantile on the
/// calibration half, loss on the prediction half, SGD step), then estimate
/// `d̂_k` on the validation split and update the multipliers (and, every
/// `rho_period` epochs, the penalty parameters).
pub fn run_training(
    config: &ExperimentConfig,
    data: &ExperimentData,
    method: Objective,
    seed: u64,
) -> Result<TrainedModel> {
    config.validate()?;
    let train = &data.train;
    let k = train.num_classes;
    let mut params = ClassifierParams::new(train.dim(), &config.hidden, k, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let optimizer = config.optimizer();

    if config.finetune && config.pretrain_epochs > 0 {
        let cfg = ObjectiveConfig {
            loss_kind: LossKind::CrossEntropy,
            ..ObjectiveConfig::default()
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..config.pretrain_epochs {
            order.shuffle(&mut rng);
            for batch in chunks(&order, config.batch_size) {
                let x = train.features.select(ndarray::Axis(0), batch);
                let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
                let (_, grads) =
                    total_training_loss(&params, x.view(), &y, &TrainingObjective::Classification, &cfg, &mut rng)?;
                params.sgd_step(&grads, &optimizer, epoch, config.pretrain_epochs)?;
            }
        }
        params.reinit_final_layer(seed.wrapping_add(1));
    }

    let eta = config.eta.max(f64::MIN_POSITIVE);
    let mut alm = AlmState::new(k, config.lambda0, config.rho0, config.beta, config.rho_period, eta)?;
    let mut hr = HrState::new(k, config.hr_lambda0, config.hr_mu, config.hr_tau)?;
    let class_weights = match &config.class_weights {
        Some(w) if w.len() != k => {
            return Err(config_err(format!("class_weights has {} entries for {k} classes", w.len())))
        }
        Some(w) => w.clone(),
        None => vec![config.conformal_weight; k],
    };
    let obj_cfg = ObjectiveConfig {
        loss_kind: config.loss_kind(method),
        size: config.size_config(),
        split_fraction: config.split_fraction,
        cls_on_pred_only: config.cls_on_pred_only,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = RunLog {
        method,
        seed,
        epochs: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        // the heuristic rule trains with its own multipliers and fixed ρ
        let hr_alm = AlmState {
            lambda: hr.lambda.clone(),
            ..alm.clone()
        };
        let (lambda_used, rho_used) = match method {
            Objective::Cact => (alm.lambda.clone(), alm.rho.clone()),
            Objective::CactHr => (hr.lambda.clone(), alm.rho.clone()),
            Objective::Conftr | Objective::Cut => (vec![config.conformal_weight; k], vec![0.0; k]),
            Objective::Classwise => (class_weights.clone(), vec![0.0; k]),
            Objective::Ce | Objective::Fl => (vec![0.0; k], vec![0.0; k]),
        };
        let objective = match method {
            Objective::Ce | Objective::Fl => TrainingObjective::Classification,
            Objective::Conftr => TrainingObjective::ConfTr {
                weight: config.conformal_weight,
            },
            Objective::Cut => TrainingObjective::Cut {
                weight: config.conformal_weight,
            },
            Objective::Cact => TrainingObjective::Cact {
                alm: &alm,
                penalty: config.penalty,
            },
            Objective::CactHr => TrainingObjective::Cact {
                alm: &hr_alm,
                penalty: config.penalty,
            },
            Objective::Classwise => TrainingObjective::Classwise {
                weights: &class_weights,
            },
        };

        let (mut sum, mut sum_cls, mut sum_conf, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut last_q = None;
        for batch in chunks(&order, config.batch_size) {
            let x = train.features.select(ndarray::Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (b, grads) = total_training_loss(&params, x.view(), &y, &objective, &obj_cfg, &mut rng)?;
            if !b.total.is_finite() || !grads.is_finite() {
                return Err(divergence(method, epoch + 1, &alm, &hr, b.total));
            }
            params.sgd_step(&grads, &optimizer, epoch, config.epochs)?;
            let w = batch.len() as f64;
            sum += w * b.total;
            sum_cls += w * b.classification;
            sum_conf += w * b.conformal;
            seen += batch.len();
            last_q = b.threshold.or(last_q);
        }
        let n = seen.max(1) as f64;

        let mut entry = EpochLog {
            epoch: epoch + 1,
            learning_rate: optimizer.lr_at(epoch, config.epochs),
            loss: sum / n,
            cls_loss: sum_cls / n,
            conformal_loss: sum_conf / n,
            lambda: lambda_used,
            rho: rho_used,
            d_hat: vec![None; k],
            val_threshold: None,
        };
        if matches!(method, Objective::Cact | Objective::CactHr) {
            let (d_hat, q) = validation_sizes(&params, &data.val, config, last_q)?;
            if !config.freeze_multipliers {
                if method == Objective::Cact {
                    alm.update_multipliers(config.penalty, &d_hat)?;
                    alm.update_rho(&d_hat, epoch + 1)?;
                } else {
                    let pen = d_hat
                        .iter()
                        .enumerate()
                        .map(|(c, d)| {
                            d.map(|d| penalty(config.penalty, alm.normalized(d), hr.lambda[c], alm.rho[c]))
                                .transpose()
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    hr.update_multipliers_hr(&pen)?;
                }
            }
            entry.d_hat = d_hat;
            entry.val_threshold = q;
        }
        log::debug!("{} seed {seed} epoch {}: loss {:.5}", method.name(), epoch + 1, entry.loss);
        log.epochs.push(entry);
    }
    Ok(TrainedModel {
        method,
        seed,
        params,
        log,
    })
}

/// Aggregated metrics of one (method, seed, score, mode, α) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Objective,
    pub seed: u64,
    pub score: String,
    pub mode: CpMode,
    pub alpha: f64,
    pub gamma: f64,
    pub report: AggregateReport,
}

fn calibrate(
    mode: CpMode,
    scores: &[f64],
    labels: &[usize],
    k: usize,
    alpha: f64,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<crate::ConformalThresholds> {
    Ok(match mode {
        CpMode::Split => calibrate_split(scores, alpha)?,
        CpMode::Label => calibrate_label(scores, labels, k, alpha)?,
        CpMode::Cluster => {
            let mut cc = ClusterConfig::default_for(k, alpha);
            cc.clusters = config.clusters.unwrap_or(cc.clusters);
            cc.min_count = config.cluster_min_count.unwrap_or(cc.min_count);
            cc.seed = seed;
            calibrate_cluster(scores, labels, k, alpha, &cc)?
        }
    })
}

/// Calibrate and evaluate `params` over random re-splits of `D_cal ∪ D_test`
/// for every configured score, CP mode and α.
pub fn run_eval(
    params: &ClassifierParams,
    config: &ExperimentConfig,
    data: &ExperimentData,
    method: Objective,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let pool = data.cal.concat(&data.test)?;
    let k = pool.num_classes;
    let n_cal = data.cal.len();
    let probs = softmax(params.forward(pool.features.view())?.view());
    let mut out = Vec::new();
    for score_name in &config.scores {
        let kind = config.score_kind(score_name)?;
        for &mode in &config.cp_modes {
            for &alpha in &config.alphas {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
                let mut reports = Vec::with_capacity(config.resamples);
                for _ in 0..config.resamples {
                    let mut order: Vec<usize> = (0..pool.len()).collect();
                    order.shuffle(&mut rng);
                    let scores = compute_scores(probs.view(), kind, config.randomized, &mut rng)?;
                    let (cal_idx, test_idx) = order.split_at(n_cal);
                    let cal_scores: Vec<f64> = cal_idx.iter().map(|&i| scores.values[[i, pool.labels[i]]]).collect();
                    let cal_labels: Vec<usize> = cal_idx.iter().map(|&i| pool.labels[i]).collect();
                    let thresholds = calibrate(mode, &cal_scores, &cal_labels, k, alpha, config, seed)?;
                    let test_scores = scores.values.select(ndarray::Axis(0), test_idx);
                    let sets = predict_sets(test_scores.view(), &thresholds)?;
                    let labels: Vec<usize> = test_idx.iter().map(|&i| pool.labels[i]).collect();
                    let test_probs = probs.select(ndarray::Axis(0), test_idx);
                    reports.push(evaluate(&sets, &labels, test_probs.view(), alpha, &config.topk)?);
                }
                out.push(EvalRecord {
                    method,
                    seed,
                    score: score_name.clone(),
                    mode,
                    alpha,
                    gamma: config.gamma,
                    report: aggregate(&reports).expect("at least one resample"),
                });
            }
        }
    }
    Ok(out)
}

/// Trained models and evaluation records of every (method, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub logs: Vec<RunLog>,
    pub records: Vec<EvalRecord>,
}

pub fn run_experiment(config: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentResult> {
    let mut result = ExperimentResult {
        logs: Vec::new(),
        records: Vec::new(),
    };
    for &method in &config.methods {
        for &seed in &config.seeds {
            let model = run_training(config, data, method, seed)?;
            result.records.extend(run_eval(&model.params, config, data, method, seed)?);
            result.logs.push(model.log);
        }
    }
    Ok(result)
}

/// Parameter swept by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Eta,
    AlphaTest,
    Gamma,
    PenaltyKind,
    Temperature,
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.replace('_', "-").as_str() {
            "eta" => Ok(AblationAxis::Eta),
            "alpha-test" | "alpha" => Ok(AblationAxis::AlphaTest),
            "gamma" => Ok(AblationAxis::Gamma),
            "penalty-kind" | "penalty" => Ok(AblationAxis::PenaltyKind),
            "temperature" => Ok(AblationAxis::Temperature),
            other => Err(format!("unknown ablation axis `{other}`")),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Eta => "eta",
            AblationAxis::AlphaTest => "alpha_test",
            AblationAxis::Gamma => "gamma",
            AblationAxis::PenaltyKind => "penalty_kind",
            AblationAxis::Temperature => "temperature",
        }
    }
}

/// One row of the long-format ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub method: String,
    pub score: String,
    pub mode: String,
    pub alpha: f64,
    /// Mean over seeds of the resample means.
    pub size: f64,
    pub coverage: f64,
    pub cov_gap: f64,
}

fn mean_rows(axis: AblationAxis, value: &str, records: &[EvalRecord]) -> Vec<AblationRow> {
    let mut groups: BTreeMap<(Objective, String, CpMode, u64), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.score.clone(), r.mode, r.alpha.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, score, mode, alpha), rs)| {
            let m = rs.len() as f64;
            AblationRow {
                axis: axis.name().into(),
                value: value.into(),
                method: method.name().into(),
                score,
                mode: mode.name().into(),
                alpha: f64::from_bits(alpha),
                size: rs.iter().map(|r| r.report.avg_size.mean).sum::<f64>() / m,
                coverage: rs.iter().map(|r| r.report.coverage.mean).sum::<f64>() / m,
                cov_gap: rs.iter().map(|r| r.report.cov_gap.mean).sum::<f64>() / m,
            }
        })
        .collect()
}

/// Sweep one parameter. `alpha_test` trains once per (method, seed) and only
/// re-evaluates; every other axis retrains, and `gamma` regenerates the
/// training set while the held-out splits stay fixed.
pub fn run_ablation(config: &ExperimentConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    if axis == AblationAxis::AlphaTest {
        let alphas = values
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| config_err(format!("bad alpha `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        let data = prepare_data(config)?;
        for &method in &config.methods {
            for &seed in &config.seeds {
                let model = run_training(config, &data, method, seed)?;
                for (value, &alpha) in values.iter().zip(&alphas) {
                    let cfg = ExperimentConfig {
                        alphas: vec![alpha],
                        ..config.clone()
                    };
                    cfg.validate()?;
                    let records = run_eval(&model.params, &cfg, &data, method, seed)?;
                    rows.extend(mean_rows(axis, value, &records));
                }
            }
        }
        // one row per (value, method, score, mode) after averaging seeds
        return Ok(average_seeds(rows));
    }
    for value in values {
        let key = match axis {
            AblationAxis::Eta => "eta",
            AblationAxis::Gamma => "gamma",
            AblationAxis::PenaltyKind => "penalty",
            AblationAxis::Temperature => "temperature",
            AblationAxis::AlphaTest => unreachable!(),
        };
        let raw = if axis == AblationAxis::PenaltyKind {
            format!("\"{}\"", value.to_ascii_lowercase())
        } else {
            value.clone()
        };
        let cfg = config.with_overrides(&[(key.to_string(), raw)])?;
        let data = prepare_data(&cfg)?;
        let result = run_experiment(&cfg, &data)?;
        rows.extend(mean_rows(axis, value, &result.records));
    }
    Ok(rows)
}

fn average_seeds(rows: Vec<AblationRow>) -> Vec<AblationRow> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<AblationRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.value.clone(), r.method.clone(), r.score.clone(), r.mode.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let m = rs.len() as f64;
            AblationRow {
                size: rs.iter().map(|r| r.size).sum::<f64>() / m,
                coverage: rs.iter().map(|r| r.coverage).sum::<f64>() / m,
                cov_gap: rs.iter().map(|r| r.cov_gap).sum::<f64>() / m,
                ..rs[0].clone()
            }
        })
        .collect()
}

/// Flat result row for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub score: String,
    pub mode: String,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    pub coverage: f64,
    pub coverage_sd: f64,
    pub size: f64,
    pub size_sd: f64,
    pub cov_gap: f64,
    pub cov_gap_sd: f64,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
}

impl From<&EvalRecord> for ResultRow {
    fn from(r: &EvalRecord) -> Self {
        Self {
            method: r.method.name().into(),
            score: r.score.clone(),
            mode: r.mode.name().into(),
            alpha: r.alpha,
            gamma: r.gamma,
            seed: r.seed,
            coverage: r.report.coverage.mean,
            coverage_sd: r.report.coverage.sd,
            size: r.report.avg_size.mean,
            size_sd: r.report.avg_size.sd,
            cov_gap: r.report.cov_gap.mean,
            cov_gap_sd: r.report.cov_gap.sd,
            top1: r.report.topk.get(&1).map(|s| s.mean),
            top3: r.report.topk.get(&3).map(|s| s.mean),
        }
    }
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Create the run directory and echo the resolved configuration into it.
pub fn prepare_run_dir(config: &ExperimentConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => config.run_dir()?,
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TrajectoryRow {
    method: String,
    seed: u64,
    epoch: usize,
    class: usize,
    lambda: f64,
    rho: f64,
    d_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PerClassRow {
    method: String,
    score: String,
    mode: String,
    alpha: f64,
    frequency_rank: usize,
    class: usize,
    train_count: usize,
    coverage: f64,
    avg_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ScatterRow {
    method: String,
    score: String,
    cov_gap: f64,
    size: f64,
    coverage: f64,
}

/// Write the data behind the figures:
///
/// - `lambda_trajectory.csv`: one row per (run, epoch, class);
/// - `per_class.csv`: class coverage and size by descending training frequency;
/// - `scatter.csv`: one (cov_gap, size) point per (method, score), averaged
///   over seeds, for the first CP mode and α.
pub fn emit_plot_data(
    logs: &[RunLog],
    records: &[EvalRecord],
    train_counts: &[usize],
    outdir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)?;
    let mut traj = Vec::new();
    for log in logs {
        for e in &log.epochs {
            for class in 0..e.lambda.len() {
                traj.push(TrajectoryRow {
                    method: log.method.name().into(),
                    seed: log.seed,
                    epoch: e.epoch,
                    class,
                    lambda: e.lambda[class],
                    rho: e.rho[class],
                    d_hat: e.d_hat.get(class).copied().flatten(),
                });
            }
        }
    }

    // descending frequency, ties to the smaller class
    let mut rank: Vec<usize> = (0..train_counts.len()).collect();
    rank.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let mut groups: BTreeMap<(Objective, String, CpMode, u64), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.score.clone(), r.mode, r.alpha.to_bits()))
            .or_default()
            .push(r);
    }
    let mut per_class = Vec::new();
    for ((method, score, mode, alpha), rs) in &groups {
        for (pos, &class) in rank.iter().enumerate() {
            let stats: Vec<_> = rs
                .iter()
                .filter_map(|r| r.report.per_class.iter().find(|c| c.class == class))
                .collect();
            if stats.is_empty() {
                continue;
            }
            let m = stats.len() as f64;
            per_class.push(PerClassRow {
                method: method.name().into(),
                score: score.clone(),
                mode: mode.name().into(),
                alpha: f64::from_bits(*alpha),
                frequency_rank: pos,
                class,
                train_count: train_counts[class],
                coverage: stats.iter().map(|c| c.coverage).sum::<f64>() / m,
                avg_size: stats.iter().map(|c| c.avg_size).sum::<f64>() / m,
            });
        }
    }

    let mut scatter = Vec::new();
    if let Some(first) = records.first() {
        let mut pairs: BTreeMap<(Objective, String), Vec<&EvalRecord>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.mode == first.mode && r.alpha == first.alpha) {
            pairs.entry((r.method, r.score.clone())).or_default().push(r);
        }
        for ((method, score), rs) in pairs {
            let m = rs.len() as f64;
            scatter.push(ScatterRow {
                method: method.name().into(),
                score,
                cov_gap: rs.iter().map(|r| r.report.cov_gap.mean).sum::<f64>() / m,
                size: rs.iter().map(|r| r.report.avg_size.mean).sum::<f64>() / m,
                coverage: rs.iter().map(|r| r.report.coverage.mean).sum::<f64>() / m,
            });
        }
    }

    let paths = [
        outdir.join("lambda_trajectory.csv"),
        outdir.join("per_class.csv"),
        outdir.join("scatter.csv"),
    ];
    write_rows(&traj, &paths[0])?;
    write_rows(&per_class, &paths[1])?;
    write_rows(&scatter, &paths[2])?;
    Ok(paths.to_vec())
}

/// Features as `f64` matrix helper for callers building custom batches.
pub fn features_of(data: &LabeledDataset, indices: &[usize]) -> Array2<f64> {
    data.features.select(ndarray::Axis(0), indices)
}
