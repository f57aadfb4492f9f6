//! Coverage, set size, coverage gap and top-k accuracy.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::descending_order;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{sets} prediction sets for {labels} labels")]
    Length { sets: usize, labels: usize },

    #[error("probability matrix has {rows} rows for {labels} labels")]
    ProbRows { rows: usize, labels: usize },

    #[error("no examples to evaluate")]
    Empty,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub coverage: f64,
    pub avg_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub coverage: f64,
    pub avg_size: f64,
    /// `100 · mean_y |c_y − (1 − α)|` over classes present in the labels.
    pub cov_gap: f64,
    /// Classes present in the labels only.
    pub per_class: Vec<ClassStats>,
    pub topk: BTreeMap<usize, f64>,
}

/// Metrics of prediction sets against the true labels.
pub fn evaluate(
    sets: &[Vec<usize>],
    labels: &[usize],
    probs: ArrayView2<f64>,
    alpha: f64,
    ks: &[usize],
) -> Result<EvalReport> {
    if sets.len() != labels.len() {
        return Err(MetricsError::Length {
            sets: sets.len(),
            labels: labels.len(),
        });
    }
    if probs.nrows() != labels.len() {
        return Err(MetricsError::ProbRows {
            rows: probs.nrows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = probs.ncols();
    let n = labels.len() as f64;
    let mut covered = vec![0usize; k];
    let mut count = vec![0usize; k];
    let mut size = vec![0usize; k];
    for (set, &y) in sets.iter().zip(labels) {
        if y >= k {
            return Err(MetricsError::LabelOutOfRange { label: y, classes: k });
        }
        count[y] += 1;
        size[y] += set.len();
        if set.contains(&y) {
            covered[y] += 1;
        }
    }
    let per_class: Vec<ClassStats> = (0..k)
        .filter(|&y| {
            if count[y] == 0 {
                log::warn!("class {y} absent from the evaluation labels; skipped in the coverage gap");
            }
            count[y] > 0
        })
        .map(|y| ClassStats {
            class: y,
            count: count[y],
            coverage: covered[y] as f64 / count[y] as f64,
            avg_size: size[y] as f64 / count[y] as f64,
        })
        .collect();
    let target = 1.0 - alpha;
    let cov_gap =
        100.0 * per_class.iter().map(|c| (c.coverage - target).abs()).sum::<f64>() / per_class.len() as f64;

    let ranks: Vec<usize> = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| descending_order(row).iter().position(|&c| c == y).expect("label in range"))
        .collect();
    let topk = ks
        .iter()
        .map(|&kk| (kk, ranks.iter().filter(|&&r| r < kk).count() as f64 / n))
        .collect();

    Ok(EvalReport {
        alpha,
        coverage: covered.iter().sum::<usize>() as f64 / n,
        avg_size: size.iter().sum::<usize>() as f64 / n,
        cov_gap,
        per_class,
        topk,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

/// Mean ± sd of several reports over resamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub alpha: f64,
    pub resamples: usize,
    pub coverage: Summary,
    pub avg_size: Summary,
    pub cov_gap: Summary,
    pub topk: BTreeMap<usize, Summary>,
    /// Per class: mean coverage and mean set size over resamples.
    pub per_class: Vec<ClassStats>,
}

pub fn aggregate(reports: &[EvalReport]) -> Option<AggregateReport> {
    let first = reports.first()?;
    let pick = |f: &dyn Fn(&EvalReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let topk = first
        .topk
        .keys()
        .map(|&k| (k, pick(&|r: &EvalReport| r.topk.get(&k).copied().unwrap_or(f64::NAN))))
        .collect();
    let mut classes: BTreeMap<usize, (usize, f64, f64, usize)> = BTreeMap::new();
    for r in reports {
        for c in &r.per_class {
            let e = classes.entry(c.class).or_default();
            e.0 += c.count;
            e.1 += c.coverage;
            e.2 += c.avg_size;
            e.3 += 1;
        }
    }
    let per_class = classes
        .into_iter()
        .map(|(class, (count, cov, size, times))| ClassStats {
            class,
            count: count / times,
            coverage: cov / times as f64,
            avg_size: size / times as f64,
        })
        .collect();
    Some(AggregateReport {
        alpha: first.alpha,
        resamples: reports.len(),
        coverage: pick(&|r| r.coverage),
        avg_size: pick(&|r| r.avg_size),
        cov_gap: pick(&|r| r.cov_gap),
        topk,
        per_class,
    })
}
