//! Non-conformity scores and smoothed prediction-set sizes.
//!
//! Scores follow the convention "lower is more conforming": a label belongs
//! to a prediction set when its score does not exceed the calibrated
//! threshold.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, ConformalThresholds};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("probability {value} at ({row}, {col}) outside [0, 1]")]
    Domain { row: usize, col: usize, value: f64 },

    #[error("{got} uniform draws for {rows} rows")]
    DrawCount { rows: usize, got: usize },

    #[error("uniform draw {0} outside [0, 1]")]
    DrawDomain(f64),

    #[error("invalid smoothing config: {0}")]
    Smoothing(String),

    #[error("RAPS k_reg must be positive")]
    RapsRank,
}

pub type Result<T> = std::result::Result<T, ScoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreKind {
    /// `1 − π(x)_y`.
    Thr,
    /// Cumulative mass of labels ranked above `y`, plus `U·π(x)_y`.
    Aps,
    /// APS plus `λ_reg · max(0, rank − k_reg)`.
    Raps { lambda_reg: f64, k_reg: usize },
    /// `−log π(x)_y`, used as the training-time score.
    NegLogProb,
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Thr => "thr",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps { .. } => "raps",
            ScoreKind::NegLogProb => "neglogprob",
        }
    }
}

/// Per-example, per-label non-conformity scores `[n × K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Array2<f64>,
    pub kind: ScoreKind,
    /// Whether the APS/RAPS `U` term used random draws.
    pub randomized: bool,
}

impl ScoreMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    /// Score of the true label of every row.
    pub fn true_label_scores(&self, labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.values[[i, y]])
            .collect()
    }
}

/// Temperature of the sigmoid set-membership indicator and steepness of the
/// relaxed sort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub temperature: f64,
    pub steepness: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            steepness: 10.0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ScoreError::Smoothing(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(ScoreError::Smoothing(format!(
                "steepness must be positive, got {}",
                self.steepness
            )));
        }
        Ok(())
    }
}

const PROB_TOL: f64 = 1e-9;

fn check_probs(probs: ArrayView2<f64>) -> Result<()> {
    for ((row, col), &value) in probs.indexed_iter() {
        if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&value) {
            return Err(ScoreError::Domain { row, col, value });
        }
    }
    Ok(())
}

fn check_draws(rows: usize, u: &[f64]) -> Result<()> {
    if u.len() != rows {
        return Err(ScoreError::DrawCount { rows, got: u.len() });
    }
    if let Some(&bad) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ScoreError::DrawDomain(bad));
    }
    Ok(())
}

/// Labels ordered by descending probability; ties go to the smaller index.
pub fn descending_order(row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

pub fn score_thr(probs: ArrayView2<f64>) -> Result<ScoreMatrix> {
    check_probs(probs)?;
    Ok(ScoreMatrix {
        values: probs.mapv(|p| 1.0 - p),
        kind: ScoreKind::Thr,
        randomized: false,
    })
}

/// APS scores with one `U` draw per example (shared across its labels).
pub fn score_aps(probs: ArrayView2<f64>, u: &[f64]) -> Result<ScoreMatrix> {
    check_probs(probs)?;
    check_draws(probs.nrows(), u)?;
    Ok(ScoreMatrix {
        values: aps_values(probs, u, 0.0, usize::MAX),
        kind: ScoreKind::Aps,
        randomized: u.iter().any(|&v| v != 1.0),
    })
}

pub fn score_raps(probs: ArrayView2<f64>, u: &[f64], lambda_reg: f64, k_reg: usize) -> Result<ScoreMatrix> {
    check_probs(probs)?;
    check_draws(probs.nrows(), u)?;
    if k_reg == 0 {
        return Err(ScoreError::RapsRank);
    }
    Ok(ScoreMatrix {
        values: aps_values(probs, u, lambda_reg, k_reg),
        kind: ScoreKind::Raps { lambda_reg, k_reg },
        randomized: u.iter().any(|&v| v != 1.0),
    })
}

fn aps_values(probs: ArrayView2<f64>, u: &[f64], lambda_reg: f64, k_reg: usize) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut above = 0.0;
        for (r, &label) in descending_order(row).iter().enumerate() {
            let rank = r + 1;
            let p = row[label];
            let penalty = if lambda_reg == 0.0 {
                0.0
            } else {
                lambda_reg * rank.saturating_sub(k_reg) as f64
            };
            out[[i, label]] = above + u[i] * p + penalty;
            above += p;
        }
    }
    out
}

/// Negative log-probabilities from log-softmax output.
pub fn score_neg_log_prob(log_probs: ArrayView2<f64>) -> ScoreMatrix {
    ScoreMatrix {
        values: log_probs.mapv(|v| -v),
        kind: ScoreKind::NegLogProb,
        randomized: false,
    }
}

/// Scores of the given kind from probabilities; `rng` supplies the APS/RAPS
/// `U` draws when `randomized` is set, otherwise `U = 1`.
pub fn compute_scores<R: Rng + ?Sized>(
    probs: ArrayView2<f64>,
    kind: ScoreKind,
    randomized: bool,
    rng: &mut R,
) -> Result<ScoreMatrix> {
    let draws = |rng: &mut R| -> Vec<f64> {
        if randomized {
            (0..probs.nrows()).map(|_| rng.random::<f64>()).collect()
        } else {
            vec![1.0; probs.nrows()]
        }
    };
    match kind {
        ScoreKind::Thr => score_thr(probs),
        ScoreKind::Aps => score_aps(probs, &draws(rng)),
        ScoreKind::Raps { lambda_reg, k_reg } => score_raps(probs, &draws(rng), lambda_reg, k_reg),
        ScoreKind::NegLogProb => {
            check_probs(probs)?;
            Ok(score_neg_log_prob(probs.mapv(f64::ln).view()))
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft set size per example: `Σ_y σ((q − s_y)/T)`.
pub fn smooth_set_size(scores: ArrayView2<f64>, q: f64, cfg: &SmoothingConfig) -> Array1<f64> {
    let t = cfg.temperature;
    scores
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&s| sigmoid((q - s) / t)).sum())
        .collect()
}

/// Soft sizes together with their partial derivatives.
#[derive(Debug, Clone)]
pub struct SoftSizes {
    pub sizes: Array1<f64>,
    /// `∂ size_i / ∂ s_iy`.
    pub d_scores: Array2<f64>,
    /// `∂ size_i / ∂ q`.
    pub d_threshold: Array1<f64>,
}

pub fn smooth_set_size_with_grad(scores: ArrayView2<f64>, q: f64, cfg: &SmoothingConfig) -> SoftSizes {
    let t = cfg.temperature;
    let (n, _) = scores.dim();
    let mut sizes = Array1::zeros(n);
    let mut d_scores = Array2::zeros(scores.dim());
    let mut d_threshold = Array1::zeros(n);
    for (i, row) in scores.rows().into_iter().enumerate() {
        for (y, &s) in row.iter().enumerate() {
            let sig = sigmoid((q - s) / t);
            let slope = sig * (1.0 - sig) / t;
            sizes[i] += sig;
            d_scores[[i, y]] = -slope;
            d_threshold[i] += slope;
        }
    }
    SoftSizes {
        sizes,
        d_scores,
        d_threshold,
    }
}

/// Hard count `Σ_y 1[s_y ≤ q]` per example.
pub fn hard_set_size(scores: ArrayView2<f64>, q: f64) -> Array1<f64> {
    scores
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&s| s <= q).count() as f64)
        .collect()
}

/// Labels whose score does not exceed their group's threshold.
pub fn hard_set(
    row: ArrayView1<f64>,
    thresholds: &ConformalThresholds,
) -> std::result::Result<Vec<usize>, CalibrationError> {
    let mut set = Vec::new();
    for (label, &s) in row.iter().enumerate() {
        if s <= thresholds.threshold_for(label)? {
            set.push(label);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ThresholdMode;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn row(m: &ScoreMatrix, i: usize) -> Vec<f64> {
        m.values.row(i).to_vec()
    }

    #[test]
    fn thr_examples() {
        let s = score_thr(array![[0.7, 0.2, 0.1]].view()).unwrap();
        assert!(close(&row(&s, 0), &[0.3, 0.8, 0.9], 1e-12));
        let s = score_thr(array![[0.25, 0.25, 0.25, 0.25]].view()).unwrap();
        assert!(close(&row(&s, 0), &[0.75; 4], 1e-15));
        let s = score_thr(array![[0.0, 1.0, 0.0]].view()).unwrap();
        assert_eq!(row(&s, 0), vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            score_thr(array![[1.2, -0.2]].view()),
            Err(ScoreError::Domain { .. })
        ));
    }

    #[test]
    fn aps_examples() {
        let p = array![[0.5, 0.3, 0.2]];
        let s = score_aps(p.view(), &[1.0]).unwrap();
        assert!(close(&row(&s, 0), &[0.5, 0.8, 1.0], 1e-12));
        assert!(!s.randomized);
        let s = score_aps(p.view(), &[0.0]).unwrap();
        assert!(close(&row(&s, 0), &[0.0, 0.5, 0.8], 1e-12));
        assert!(s.randomized);
        // tie: smaller index ranks first
        let s = score_aps(array![[0.5, 0.5]].view(), &[1.0]).unwrap();
        assert_eq!(row(&s, 0), vec![0.5, 1.0]);
    }

    #[test]
    fn raps_examples() {
        let p = array![[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]];
        let u = [1.0, 0.4];
        let aps = score_aps(p.view(), &u).unwrap();
        let zero = score_raps(p.view(), &u, 0.0, 1).unwrap();
        assert_eq!(aps.values, zero.values);
        let s = score_raps(p.view(), &[1.0, 1.0], 0.1, 1).unwrap();
        assert!(close(&row(&s, 0), &[0.5, 0.9, 1.2], 1e-12));
        let inactive = score_raps(p.view(), &u, 0.7, 3).unwrap();
        assert_eq!(aps.values, inactive.values);
        assert_eq!(score_raps(p.view(), &u, 0.1, 0), Err(ScoreError::RapsRank));
    }

    #[test]
    fn draw_validation() {
        let p = array![[0.5, 0.5]];
        assert!(matches!(score_aps(p.view(), &[]), Err(ScoreError::DrawCount { .. })));
        assert!(matches!(score_aps(p.view(), &[1.5]), Err(ScoreError::DrawDomain(_))));
    }

    #[test]
    fn soft_size_at_threshold_is_half_k() {
        let s = array![[0.4, 0.4, 0.4, 0.4, 0.4]];
        let cfg = SmoothingConfig::default();
        assert_eq!(smooth_set_size(s.view(), 0.4, &cfg)[0], 2.5);
    }

    #[test]
    fn soft_size_converges_to_hard_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SmoothingConfig {
            temperature: 1e-6,
            steepness: 10.0,
        };
        let q = 0.5;
        let scores = Array2::from_shape_simple_fn((50, 6), || loop {
            let v: f64 = rng.random();
            if (v - q).abs() > 1e-3 {
                break v;
            }
        });
        let soft = smooth_set_size(scores.view(), q, &cfg);
        let hard = hard_set_size(scores.view(), q);
        assert!(close(soft.as_slice().unwrap(), hard.as_slice().unwrap(), 1e-6));
    }

    #[test]
    fn soft_size_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SmoothingConfig {
            temperature: 0.3,
            steepness: 10.0,
        };
        let scores = Array2::from_shape_simple_fn((4, 3), || rng.random::<f64>());
        let q = 0.45;
        let g = smooth_set_size_with_grad(scores.view(), q, &cfg);
        let h = 1e-6;
        for i in 0..4 {
            for y in 0..3 {
                let mut sp = scores.clone();
                sp[[i, y]] += h;
                let mut sm = scores.clone();
                sm[[i, y]] -= h;
                let fd = (smooth_set_size(sp.view(), q, &cfg)[i] - smooth_set_size(sm.view(), q, &cfg)[i]) / (2.0 * h);
                let a = g.d_scores[[i, y]];
                assert!((a - fd).abs() / a.abs().max(1e-8) < 1e-4);
            }
            let fd = (smooth_set_size(scores.view(), q + h, &cfg)[i]
                - smooth_set_size(scores.view(), q - h, &cfg)[i])
                / (2.0 * h);
            assert!((g.d_threshold[i] - fd).abs() / fd.abs() < 1e-4);
        }
    }

    #[test]
    fn hard_set_examples() {
        let scores = array![0.3, 0.8, 0.9];
        let marginal = ConformalThresholds::marginal(0.1, 0.5);
        assert_eq!(hard_set(scores.view(), &marginal).unwrap(), vec![0]);
        let per = ConformalThresholds {
            alpha: 0.1,
            mode: ThresholdMode::PerLabel {
                thresholds: vec![f64::INFINITY, 0.1, 0.1],
            },
        };
        assert_eq!(hard_set(scores.view(), &per).unwrap(), vec![0]);
        let low = ConformalThresholds::marginal(0.1, 0.2);
        assert!(hard_set(scores.view(), &low).unwrap().is_empty());
        let short = ConformalThresholds {
            alpha: 0.1,
            mode: ThresholdMode::PerLabel {
                thresholds: vec![0.5],
            },
        };
        assert!(hard_set(scores.view(), &short).is_err());
        // non-strict inequality
        let exact = ConformalThresholds::marginal(0.1, 0.8);
        assert_eq!(hard_set(scores.view(), &exact).unwrap(), vec![0, 1]);
    }

    fn simplex_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn aps_sorted_scores_are_cumulative_sums(p in simplex_row(6)) {
            let probs = Array2::from_shape_vec((1, 6), p.clone()).unwrap();
            let s = score_aps(probs.view(), &[1.0]).unwrap();
            let order = descending_order(probs.row(0));
            let mut acc = 0.0;
            for &label in &order {
                acc += p[label];
                prop_assert!((s.values[[0, label]] - acc).abs() < 1e-12);
            }
            prop_assert!((s.values[[0, order[5]]] - 1.0).abs() < 1e-9);
        }

        #[test]
        fn scores_are_permutation_equivariant(
            p in simplex_row(5),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
            u in 0.0f64..1.0,
        ) {
            // distinct probabilities keep the tie rule out of the picture
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
            let probs = Array2::from_shape_vec((1, 5), p.clone()).unwrap();
            let permuted = Array2::from_shape_fn((1, 5), |(_, j)| p[perm[j]]);
            for kind in [ScoreKind::Thr, ScoreKind::Aps, ScoreKind::Raps { lambda_reg: 0.2, k_reg: 2 }] {
                let (a, b) = match kind {
                    ScoreKind::Thr => (score_thr(probs.view()).unwrap(), score_thr(permuted.view()).unwrap()),
                    ScoreKind::Aps => (score_aps(probs.view(), &[u]).unwrap(), score_aps(permuted.view(), &[u]).unwrap()),
                    ScoreKind::Raps { lambda_reg, k_reg } => (
                        score_raps(probs.view(), &[u], lambda_reg, k_reg).unwrap(),
                        score_raps(permuted.view(), &[u], lambda_reg, k_reg).unwrap(),
                    ),
                    ScoreKind::NegLogProb => unreachable!(),
                };
                for j in 0..5 {
                    prop_assert!((b.values[[0, j]] - a.values[[0, perm[j]]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn raps_tends_to_aps(p in simplex_row(4), u in 0.0f64..1.0) {
            let probs = Array2::from_shape_vec((1, 4), p).unwrap();
            let aps = score_aps(probs.view(), &[u]).unwrap();
            let raps = score_raps(probs.view(), &[u], 1e-12, 1).unwrap();
            for (a, b) in aps.values.iter().zip(raps.values.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn soft_size_is_monotone_in_threshold(
            s in prop::collection::vec(-2.0f64..2.0, 5),
            q in -2.0f64..2.0,
            dq in 1e-3f64..1.0,
        ) {
            let scores = Array2::from_shape_vec((1, 5), s).unwrap();
            let cfg = SmoothingConfig::default();
            let lo = smooth_set_size(scores.view(), q, &cfg)[0];
            let hi = smooth_set_size(scores.view(), q + dq, &cfg)[0];
            prop_assert!(hi >= lo);
        }
    }
}
