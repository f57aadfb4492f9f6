//! Relaxed sorting and the differentiable conformal quantile.
//!
//! Row `i` (1-based) of the relaxed descending permutation of `s ∈ R^m` is
//!
//! ```text
//! P̂[i, :] = softmax_j( τ · ((m + 1 − 2i)·s_j − Σ_k |s_j − s_k|) )
//! ```
//!
//! which concentrates on the `i`-th largest entry as the steepness `τ` grows.
//! The conformal threshold is the `k* = ⌈(m+1)(1−α)⌉`-th smallest score, i.e.
//! descending row `m + 1 − k*`; only that row is needed for the quantile.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SmoothSortError {
    #[error("empty score vector")]
    Empty,

    #[error("mis-coverage level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("steepness must be positive, got {0}")]
    InvalidSteepness(f64),

    #[error("calibration set too small: order statistic {rank} of {m} scores")]
    CalibrationTooSmall { rank: usize, m: usize },
}

pub type Result<T> = std::result::Result<T, SmoothSortError>;

/// Row-stochastic relaxation of the descending-sort permutation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedPermutation {
    pub matrix: Array2<f64>,
    pub steepness: f64,
}

/// 1-based index `⌈(m+1)(1−α)⌉` of the conformal order statistic.
///
/// Products that land within floating-point noise of an integer are treated
/// as that integer, so e.g. `(9+1)·(1−0.1)` yields 9 and not 10.
pub fn conformal_rank(m: usize, alpha: f64) -> usize {
    let x = (m as f64 + 1.0) * (1.0 - alpha);
    let rounded = x.round();
    if (x - rounded).abs() <= 1e-9 * x.abs().max(1.0) {
        rounded as usize
    } else {
        x.ceil() as usize
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(SmoothSortError::InvalidAlpha(alpha))
    }
}

/// Exact conformal quantile: the `⌈(m+1)(1−α)⌉`-th smallest score, or `+∞`
/// when that index exceeds `m` (including the empty case).
pub fn hard_quantile(s: &[f64], alpha: f64) -> f64 {
    let m = s.len();
    let rank = conformal_rank(m, alpha).max(1);
    if rank > m {
        return f64::INFINITY;
    }
    let mut sorted = s.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[rank - 1]
}

/// For every element, the sums of `weights` over elements strictly below and
/// strictly above it (ties contribute to neither).
fn below_above(s: &[f64], order: &[usize], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = s.len();
    let total: f64 = weights.iter().sum();
    let mut below = vec![0.0; m];
    let mut above = vec![0.0; m];
    let mut acc = 0.0;
    let mut start = 0;
    while start < m {
        let value = s[order[start]];
        let mut end = start;
        let mut group = 0.0;
        while end < m && s[order[end]] == value {
            group += weights[order[end]];
            end += 1;
        }
        for &idx in &order[start..end] {
            below[idx] = acc;
            above[idx] = total - acc - group;
        }
        acc += group;
        start = end;
    }
    (below, above)
}

/// Shared per-vector quantities: ascending order, `Σ_k |s_j − s_k|` and
/// `#{k: s_k < s_j} − #{k: s_k > s_j}`.
struct PairwiseTerms {
    order: Vec<usize>,
    abs_sum: Vec<f64>,
    sign_sum: Vec<f64>,
}

impl PairwiseTerms {
    fn new(s: &[f64]) -> Self {
        let m = s.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
        let (sum_below, sum_above) = below_above(s, &order, s);
        let ones = vec![1.0; m];
        let (n_below, n_above) = below_above(s, &order, &ones);
        let abs_sum = (0..m)
            .map(|j| s[j] * n_below[j] - sum_below[j] + sum_above[j] - s[j] * n_above[j])
            .collect();
        let sign_sum = (0..m).map(|j| n_below[j] - n_above[j]).collect();
        Self {
            order,
            abs_sum,
            sign_sum,
        }
    }

    /// Softmax row for descending position `row` (0-based).
    fn row(&self, s: &[f64], row: usize, steepness: f64) -> Vec<f64> {
        let m = s.len();
        let coef = m as f64 - 1.0 - 2.0 * row as f64;
        let logits: Vec<f64> = (0..m)
            .map(|j| steepness * (coef * s[j] - self.abs_sum[j]))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }
}

pub fn relaxed_sort(s: &[f64], steepness: f64) -> Result<RelaxedPermutation> {
    if s.is_empty() {
        return Err(SmoothSortError::Empty);
    }
    if !(steepness > 0.0 && steepness.is_finite()) {
        return Err(SmoothSortError::InvalidSteepness(steepness));
    }
    let m = s.len();
    let terms = PairwiseTerms::new(s);
    let mut matrix = Array2::zeros((m, m));
    for i in 0..m {
        for (j, v) in terms.row(s, i, steepness).into_iter().enumerate() {
            matrix[[i, j]] = v;
        }
    }
    Ok(RelaxedPermutation { matrix, steepness })
}

/// Differentiable conformal quantile and its gradient wrt `s`.
///
/// The value is the relaxed-permutation row for the conformal order
/// statistic applied to `s`; the gradient includes the dependence of the
/// softmax weights on `s` (subgradient of `|s_j − s_k|` at ties is 0).
pub fn smooth_quantile(s: &[f64], alpha: f64, steepness: f64) -> Result<(f64, Vec<f64>)> {
    if s.is_empty() {
        return Err(SmoothSortError::Empty);
    }
    check_alpha(alpha)?;
    if !(steepness > 0.0 && steepness.is_finite()) {
        return Err(SmoothSortError::InvalidSteepness(steepness));
    }
    let m = s.len();
    let rank = conformal_rank(m, alpha).max(1);
    if rank > m {
        return Err(SmoothSortError::CalibrationTooSmall { rank, m });
    }
    let row = m - rank;
    let terms = PairwiseTerms::new(s);
    let p = terms.row(s, row, steepness);
    let value: f64 = p.iter().zip(s).map(|(pj, sj)| pj * sj).sum();

    let coef = m as f64 - 1.0 - 2.0 * row as f64;
    let w: Vec<f64> = (0..m).map(|j| steepness * p[j] * (s[j] - value)).collect();
    let (w_below, w_above) = below_above(s, &terms.order, &w);
    let grad = (0..m)
        .map(|l| p[l] + w[l] * (coef - terms.sign_sum[l]) + w_above[l] - w_below[l])
        .collect();
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(m²) evaluation of one relaxed row, independent of the
    /// sorted-prefix-sum path.
    fn naive_row(s: &[f64], row: usize, tau: f64) -> Vec<f64> {
        let m = s.len();
        let coef = (m + 1) as f64 - 2.0 * (row + 1) as f64;
        let c: Vec<f64> = s
            .iter()
            .map(|&sj| tau * (coef * sj - s.iter().map(|&sk| (sj - sk).abs()).sum::<f64>()))
            .collect();
        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = c.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    #[test]
    fn singleton() {
        let p = relaxed_sort(&[3.5], 10.0).unwrap();
        assert_eq!(p.matrix, ndarray::array![[1.0]]);
        let (v, g) = smooth_quantile(&[3.5], 0.6, 10.0).unwrap();
        assert_eq!(conformal_rank(1, 0.6), 1);
        assert_eq!(v, 3.5);
        assert!((g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sharp_relaxation_recovers_permutation() {
        let p = relaxed_sort(&[3.0, 1.0, 2.0], 100.0).unwrap();
        let hard = ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        for (a, b) in p.matrix.iter().zip(hard.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn equal_scores_give_uniform_rows() {
        let p = relaxed_sort(&[0.7; 4], 50.0).unwrap();
        assert!(p.matrix.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rows_match_naive_evaluation() {
        let s = [0.3, -1.2, 0.3, 2.0, 0.9, -0.1];
        let p = relaxed_sort(&s, 2.5).unwrap();
        for i in 0..s.len() {
            let naive = naive_row(&s, i, 2.5);
            for j in 0..s.len() {
                assert!((p.matrix[[i, j]] - naive[j]).abs() < 1e-12);
            }
            assert!((p.matrix.row(i).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quantile_of_ascending_grid() {
        let s: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(hard_quantile(&s, 0.1), 0.9);
        let (v, _) = smooth_quantile(&s, 0.1, 100.0).unwrap();
        assert!((v - 0.9).abs() < 1e-3, "{v}");
    }

    #[test]
    fn hard_quantile_examples() {
        let s: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(hard_quantile(&s, 0.1), 9.0);
        assert_eq!(conformal_rank(5, 0.05), 6);
        assert_eq!(hard_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.05), f64::INFINITY);
        // multiset: rank ⌈6·0.5⌉ = 3 of (1, 2, 2, 2, 5)
        assert_eq!(hard_quantile(&[2.0, 5.0, 2.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(hard_quantile(&[], 0.1), f64::INFINITY);
    }

    #[test]
    fn too_small_calibration_is_an_error() {
        assert_eq!(
            smooth_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.05, 10.0),
            Err(SmoothSortError::CalibrationTooSmall { rank: 6, m: 5 })
        );
        assert!(matches!(smooth_quantile(&[1.0], 0.0, 10.0), Err(SmoothSortError::InvalidAlpha(_))));
        assert!(matches!(relaxed_sort(&[1.0], -1.0), Err(SmoothSortError::InvalidSteepness(_))));
        assert_eq!(relaxed_sort(&[], 1.0), Err(SmoothSortError::Empty));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let s: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let (_, g) = smooth_quantile(&s, 0.1, 10.0).unwrap();
            let h = 1e-6;
            for l in 0..s.len() {
                let mut sp = s.clone();
                sp[l] += h;
                let mut sm = s.clone();
                sm[l] -= h;
                let fd = (smooth_quantile(&sp, 0.1, 10.0).unwrap().0 - smooth_quantile(&sm, 0.1, 10.0).unwrap().0)
                    / (2.0 * h);
                let err = (g[l] - fd).abs() / g[l].abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-3, "l={l}: {} vs {fd}", g[l]);
            }
        }
    }

    #[test]
    fn converges_to_hard_quantile_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let m = rng.random_range(10..60);
            let s: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let (v, _) = smooth_quantile(&s, 0.1, 1000.0).unwrap();
            assert!((v - hard_quantile(&s, 0.1)).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(s in prop::collection::vec(-5.0f64..5.0, 1..12), tau in 0.1f64..100.0) {
            let p = relaxed_sort(&s, tau).unwrap();
            for row in p.matrix.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn quantile_is_permutation_invariant(
            s in prop::collection::vec(0.0f64..1.0, 10..30).prop_shuffle(),
            seed in 0u64..1000,
        ) {
            let mut shuffled = s.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let a = smooth_quantile(&s, 0.1, 10.0).unwrap().0;
            let b = smooth_quantile(&shuffled, 0.1, 10.0).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(hard_quantile(&s, 0.1), hard_quantile(&shuffled, 0.1));
        }

        #[test]
        fn quantiles_are_translation_equivariant(
            s in prop::collection::vec(0.0f64..1.0, 10..30),
            c in 0.01f64..5.0,
        ) {
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            prop_assert_eq!(hard_quantile(&shifted, 0.1), hard_quantile(&s, 0.1) + c);
            let a = smooth_quantile(&s, 0.1, 10.0).unwrap().0;
            let b = smooth_quantile(&shifted, 0.1, 10.0).unwrap().0;
            prop_assert!((b - a - c).abs() < 1e-6);
        }
    }
}
