//! Post-hoc conformal calibration.
//!
//! Three calibrators share one threshold type:
//!
//! - **split**: one marginal threshold from all calibration scores;
//! - **label-conditional**: one threshold per class, `+∞` for classes with
//!   fewer than `1/α − 1` calibration samples;
//! - **cluster-conditional**: classes with enough samples are grouped by the
//!   quantiles of their score distribution (k-means), each cluster gets a
//!   threshold from its pooled scores, and the remaining classes fall back to
//!   a null group calibrated on every sample.
//!
//! Thresholds serialise to JSON; infinite thresholds are written as `null`.

use std::path::Path;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::hard_set;
use crate::smoothsort::hard_quantile;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no threshold available for label {label}")]
    MissingThreshold { label: usize },

    #[error("calibration set is empty")]
    Empty,

    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("mis-coverage level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("cluster count must be at least 1")]
    InvalidClusterCount,

    #[error("threshold file: {0}")]
    Io(#[from] std::io::Error),

    #[error("threshold json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() { Some(*v) } else { None }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod vec_inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| if x.is_finite() { Some(*x) } else { None })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::INFINITY))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    Marginal {
        #[serde(with = "inf_as_null")]
        threshold: f64,
    },
    PerLabel {
        #[serde(with = "vec_inf_as_null")]
        thresholds: Vec<f64>,
    },
    PerCluster {
        /// Cluster of every label, `None` for the null group.
        cluster_of_label: Vec<Option<usize>>,
        #[serde(with = "vec_inf_as_null")]
        thresholds: Vec<f64>,
        #[serde(with = "inf_as_null")]
        null_threshold: f64,
    },
}

/// Calibrated thresholds `q̂` for one of the three CP modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalThresholds {
    pub alpha: f64,
    #[serde(flatten)]
    pub mode: ThresholdMode,
}

impl ConformalThresholds {
    pub fn marginal(alpha: f64, threshold: f64) -> Self {
        Self {
            alpha,
            mode: ThresholdMode::Marginal { threshold },
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            ThresholdMode::Marginal { .. } => "split",
            ThresholdMode::PerLabel { .. } => "label",
            ThresholdMode::PerCluster { .. } => "cluster",
        }
    }

    /// Threshold applied to candidate label `label`.
    pub fn threshold_for(&self, label: usize) -> Result<f64> {
        match &self.mode {
            ThresholdMode::Marginal { threshold } => Ok(*threshold),
            ThresholdMode::PerLabel { thresholds } => thresholds
                .get(label)
                .copied()
                .ok_or(CalibrationError::MissingThreshold { label }),
            ThresholdMode::PerCluster {
                cluster_of_label,
                thresholds,
                null_threshold,
            } => match cluster_of_label.get(label) {
                None => Err(CalibrationError::MissingThreshold { label }),
                Some(None) => Ok(*null_threshold),
                Some(Some(c)) => thresholds
                    .get(*c)
                    .copied()
                    .ok_or(CalibrationError::MissingThreshold { label }),
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CalibrationError::InvalidAlpha(alpha))
    }
}

fn check_labels(scores: &[f64], labels: &[usize], num_classes: usize) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(CalibrationError::LabelOutOfRange {
            label,
            classes: num_classes,
        });
    }
    Ok(())
}

/// Split CP on the true-label scores of the calibration set.
pub fn calibrate_split(scores: &[f64], alpha: f64) -> Result<ConformalThresholds> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(CalibrationError::Empty);
    }
    Ok(ConformalThresholds::marginal(alpha, hard_quantile(scores, alpha)))
}

fn group_by_class(scores: &[f64], labels: &[usize], num_classes: usize) -> Vec<Vec<f64>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (&s, &y) in scores.iter().zip(labels) {
        groups[y].push(s);
    }
    groups
}

/// Label-conditional CP.
pub fn calibrate_label(
    scores: &[f64],
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
) -> Result<ConformalThresholds> {
    check_alpha(alpha)?;
    check_labels(scores, labels, num_classes)?;
    let min_samples = 1.0 / alpha - 1.0;
    let thresholds = group_by_class(scores, labels, num_classes)
        .iter()
        .map(|g| {
            if (g.len() as f64) < min_samples {
                f64::INFINITY
            } else {
                hard_quantile(g, alpha)
            }
        })
        .collect();
    Ok(ConformalThresholds {
        alpha,
        mode: ThresholdMode::PerLabel { thresholds },
    })
}

/// Settings for cluster-conditional calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub clusters: usize,
    /// Classes with fewer calibration samples go to the null group.
    pub min_count: usize,
    pub seed: u64,
}

impl ClusterConfig {
    /// `M = max(1, ⌊K/10⌋)`, `min_count = ⌈1/α⌉`.
    pub fn default_for(num_classes: usize, alpha: f64) -> Self {
        Self {
            clusters: (num_classes / 10).max(1),
            min_count: (1.0 / alpha - 1e-9).ceil() as usize,
            seed: 0,
        }
    }
}

/// Quantile levels of the per-class embedding used for clustering.
pub const EMBEDDING_LEVELS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
const KMEANS_ITERATIONS: usize = 50;

fn class_embedding(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    EMBEDDING_LEVELS
        .iter()
        .map(|&level| {
            let idx = ((level * n as f64).ceil() as usize).clamp(1, n) - 1;
            sorted[idx]
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding; returns an assignment per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iterations: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            // every point coincides with a centroid
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if target < di {
                    pick = i;
                    break;
                }
                target -= di;
            }
            pick
        };
        centroids.push(points[next].clone());
    }
    let dim = points[0].len();
    let mut assign = vec![0; n];
    for _ in 0..iterations {
        let updated: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = updated != assign;
        assign = updated;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                centroid[d] = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Cluster-conditional CP.
pub fn calibrate_cluster(
    scores: &[f64],
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    config: &ClusterConfig,
) -> Result<ConformalThresholds> {
    check_alpha(alpha)?;
    check_labels(scores, labels, num_classes)?;
    if config.clusters == 0 {
        return Err(CalibrationError::InvalidClusterCount);
    }
    if scores.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let groups = group_by_class(scores, labels, num_classes);
    let eligible: Vec<usize> = (0..num_classes)
        .filter(|&y| !groups[y].is_empty() && groups[y].len() >= config.min_count)
        .collect();
    let embeddings: Vec<Vec<f64>> = eligible.iter().map(|&y| class_embedding(&groups[y])).collect();
    let assign = kmeans(&embeddings, config.clusters, config.seed, KMEANS_ITERATIONS);

    // compact cluster ids in order of first appearance
    let mut remap: Vec<Option<usize>> = vec![None; config.clusters];
    let mut cluster_of_label = vec![None; num_classes];
    let mut next = 0;
    for (&y, &c) in eligible.iter().zip(&assign) {
        let id = *remap[c].get_or_insert_with(|| {
            next += 1;
            next - 1
        });
        cluster_of_label[y] = Some(id);
    }
    let mut pooled = vec![Vec::new(); next];
    for (y, cluster) in cluster_of_label.iter().enumerate() {
        if let Some(c) = cluster {
            pooled[*c].extend_from_slice(&groups[y]);
        }
    }
    let thresholds = pooled.iter().map(|p| hard_quantile(p, alpha)).collect();
    Ok(ConformalThresholds {
        alpha,
        mode: ThresholdMode::PerCluster {
            cluster_of_label,
            thresholds,
            null_threshold: hard_quantile(scores, alpha),
        },
    })
}

/// Prediction set for every row of a score matrix.
pub fn predict_sets(scores: ArrayView2<f64>, thresholds: &ConformalThresholds) -> Result<Vec<Vec<usize>>> {
    scores
        .rows()
        .into_iter()
        .map(|row| hard_set(row, thresholds))
        .collect()
}
