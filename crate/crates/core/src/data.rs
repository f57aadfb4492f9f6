//! Datasets: synthetic long-tailed Gaussian mixtures, CSV ingestion and the
//! validation / calibration / test split.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("imbalance ratio must lie in (0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("invalid dataset shape: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("schema: {0}")]
    Schema(String),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("pool of {0} examples is too small to split")]
    PoolTooSmall(usize),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Features, integer labels and the per-class index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    class_index: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DataError::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    label: y,
                    classes: num_classes,
                });
            }
            class_index[y].push(i);
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `I_y`: positions of the examples of class `y`.
    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_index.iter().map(Vec::len).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.num_classes).expect("subset of a valid dataset")
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() || self.num_classes != other.num_classes {
            return Err(DataError::Shape("concatenating incompatible datasets".into()));
        }
        let features = concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| DataError::Shape(e.to_string()))?;
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Self::new(features, labels, self.num_classes)
    }
}

/// Exponential long-tail profile `n_y = round(base · γ^{y/(K−1)})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    /// `min_y n_y / max_y n_y`.
    pub gamma: f64,
    /// Count of the largest (first) class.
    pub base_count: usize,
}

impl ImbalanceSpec {
    pub fn balanced(base_count: usize) -> Self {
        Self { gamma: 1.0, base_count }
    }

    pub fn counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DataError::InvalidGamma(self.gamma));
        }
        if num_classes == 1 {
            return Ok(vec![self.base_count]);
        }
        Ok((0..num_classes)
            .map(|y| {
                let e = y as f64 / (num_classes - 1) as f64;
                ((self.base_count as f64 * self.gamma.powf(e)).round() as usize).max(1)
            })
            .collect())
    }
}

/// Class-conditional Gaussians with identity covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    /// `[K × d]` class means.
    pub means: Array2<f64>,
}

const MAX_PLACEMENT_TRIES: usize = 10_000;

impl GaussianMixture {
    /// Means are random directions on the sphere of radius `separation·√d`,
    /// re-drawn until every pair is at least `separation` apart.
    pub fn new(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(DataError::Shape(format!("need K ≥ 2 and d ≥ 2, got K = {num_classes}, d = {dim}")));
        }
        if !(separation > 0.0 && separation.is_finite()) {
            return Err(DataError::Shape(format!("class separation must be positive, got {separation}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radius = separation * (dim as f64).sqrt();
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        let mut tries = 0;
        while means.len() < num_classes {
            tries += 1;
            if tries > MAX_PLACEMENT_TRIES {
                return Err(DataError::Shape("could not place well-separated class means".into()));
            }
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let v: Vec<f64> = v.iter().map(|x| x * radius / norm).collect();
            let far = means
                .iter()
                .all(|m| m.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation);
            if far {
                means.push(v);
            }
        }
        let flat = means.into_iter().flatten().collect();
        Ok(Self {
            means: Array2::from_shape_vec((num_classes, dim), flat).expect("K × d means"),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `counts[y]` draws from class `y`, grouped by class.
    pub fn sample(&self, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
        if counts.len() != self.num_classes() {
            return Err(DataError::Shape(format!(
                "{} class counts for {} classes",
                counts.len(),
                self.num_classes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = counts.iter().sum();
        let d = self.dim();
        let mut features = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (y, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[[row, j]] = self.means[[y, j]] + z;
                }
                labels.push(y);
                row += 1;
            }
        }
        LabeledDataset::new(features, labels, self.num_classes())
    }
}

/// Mixture with means from `seed` and counts from `spec`, sampled with `seed + 1`.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    spec: &ImbalanceSpec,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let counts = spec.counts(num_classes)?;
    GaussianMixture::new(num_classes, dim, separation, seed)?.sample(&counts, seed.wrapping_add(1))
}

/// `(D_val, D_cal, D_test)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSets {
    pub val: LabeledDataset,
    pub cal: LabeledDataset,
    pub test: LabeledDataset,
}

/// Stratified split: per class, half (rounded up) goes to the test set and the
/// rest is divided 20:80 into validation and calibration.
pub fn split_protocol(pool: &LabeledDataset, seed: u64) -> Result<SplitSets> {
    if pool.len() < 10 {
        return Err(DataError::PoolTooSmall(pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut val, mut cal, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (y, members) in pool.class_index().iter().enumerate() {
        let mut idx = members.clone();
        idx.shuffle(&mut rng);
        if idx.len() == 1 {
            log::warn!("class {y} has a single example; it goes to the test split");
            test.extend(idx);
            continue;
        }
        let n_test = idx.len() - idx.len() / 2;
        let rest = idx.split_off(n_test);
        test.extend(idx);
        let n_val = (0.2 * rest.len() as f64).round() as usize;
        val.extend_from_slice(&rest[..n_val]);
        cal.extend_from_slice(&rest[n_val..]);
    }
    for v in [&mut val, &mut cal, &mut test] {
        v.sort_unstable();
    }
    Ok(SplitSets {
        val: pool.subset(&val),
        cal: pool.subset(&cal),
        test: pool.subset(&test),
    })
}

/// Columns of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// `None` selects every column except the label.
    pub feature_columns: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(label_column: &str) -> Self {
        Self {
            label_column: label_column.to_string(),
            feature_columns: None,
        }
    }
}

/// Load a CSV with a header row. Returns the dataset and the raw label of
/// every class index.
///
/// Labels that already form `0..K−1` are kept; otherwise they are remapped to
/// `0..K−1` in order of first appearance.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(LabeledDataset, Vec<i64>)> {
    let (features, raw) = read_csv(path, schema)?;
    let mut distinct: Vec<i64> = Vec::new();
    for &r in &raw {
        if !distinct.contains(&r) {
            distinct.push(r);
        }
    }
    let mut sorted = distinct.clone();
    sorted.sort_unstable();
    if sorted.iter().enumerate().all(|(i, &r)| r == i as i64) {
        distinct = sorted;
    }
    let labels = remap(&raw, &distinct)?;
    let k = distinct.len();
    Ok((LabeledDataset::new(features, labels, k)?, distinct))
}

/// Load a CSV whose labels are translated with an existing table.
pub fn load_csv_with_labels(path: &Path, schema: &CsvSchema, table: &[i64]) -> Result<LabeledDataset> {
    let (features, raw) = read_csv(path, schema)?;
    let labels = remap(&raw, table)?;
    LabeledDataset::new(features, labels, table.len())
}

fn remap(raw: &[i64], table: &[i64]) -> Result<Vec<usize>> {
    let lookup: HashMap<i64, usize> = table.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    raw.iter()
        .enumerate()
        .map(|(row, r)| {
            lookup.get(r).copied().ok_or_else(|| DataError::Parse {
                row: row + 1,
                message: format!("unknown label {r}"),
            })
        })
        .collect()
}

fn read_csv(path: &Path, schema: &CsvSchema) -> Result<(Array2<f64>, Vec<i64>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(format!("missing column `{name}`")))
    };
    let label_col = position(&schema.label_column)?;
    let feature_cols: Vec<usize> = match &schema.feature_columns {
        Some(names) => names.iter().map(|n| position(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&c| c != label_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(DataError::Schema("no feature columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(DataError::Parse {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let label = record[label_col].trim();
        labels.push(label.parse::<i64>().map_err(|_| DataError::Parse {
            row,
            message: format!("label `{label}` is not an integer"),
        })?);
        for &c in &feature_cols {
            let v = record[c].trim();
            values.push(v.parse::<f64>().map_err(|_| DataError::Parse {
                row,
                message: format!("column `{}`: `{v}` is not a number", &headers[c]),
            })?);
        }
    }
    let features = Array2::from_shape_vec((labels.len(), feature_cols.len()), values)
        .map_err(|e| DataError::Shape(e.to_string()))?;
    Ok((features, labels))
}

/// Write `x0, …, x{d−1}, label` with a header row.
pub fn write_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, &y) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-split class counts and the generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub gamma: f64,
    pub num_classes: usize,
    pub dim: usize,
    pub counts: std::collections::BTreeMap<String, Vec<usize>>,
}
