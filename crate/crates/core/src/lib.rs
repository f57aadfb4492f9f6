//! Conformal prediction with class-adaptive conformal training.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: linear / MLP classifiers with hand-written backprop and SGD.
//! - [`scores`]: THR, APS and RAPS non-conformity scores plus the smoothed
//!   set size used during training.
//! - [`smoothsort`]: a relaxed descending sort and the differentiable
//!   conformal quantile built on top of it.
//! - [`calibration`]: split, label-conditional and cluster-conditional
//!   conformal calibration and prediction-set construction.
//! - [`objectives`]: size losses (marginal and class-wise), the CUT
//!   uniformity loss and the composed training objectives.
//! - [`alm`]: penalty-Lagrangian functions and the per-class multiplier /
//!   penalty-parameter schedules, plus the heuristic multiplier rule.
//! - [`data`]: synthetic long-tailed Gaussian mixtures, CSV ingestion and the
//!   validation / calibration / test split.
//! - [`metrics`]: coverage, set size, coverage gap and top-k accuracy.
//! - [`harness`]: experiment configuration, the training driver, evaluation,
//!   ablations and plot-data emission.

pub mod alm;
pub mod calibration;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod scores;
pub mod smoothsort;

pub use alm::{AlmState, HrState, PenaltyKind};
pub use calibration::{ConformalThresholds, ThresholdMode};
pub use data::{ImbalanceSpec, LabeledDataset};
pub use harness::{ExperimentConfig, Objective};
pub use metrics::EvalReport;
pub use model::{ClassifierParams, LossKind, OptimizerConfig};
pub use objectives::{BatchSplit, SizeLossConfig};
pub use scores::{ScoreKind, ScoreMatrix, SmoothingConfig};
pub use smoothsort::RelaxedPermutation;
