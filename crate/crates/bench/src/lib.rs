//! Seeded fixtures shared by the kernel benchmarks.

use cwconf_core::data::{GaussianMixture, ImbalanceSpec};
use cwconf_core::LabeledDataset;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `m` scores drawn uniformly from `[0, 3)`.
pub fn random_scores(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| 3.0 * rng.random::<f64>()).collect()
}

/// Row-normalised random probabilities.
pub fn random_probs(n: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array2::from_shape_fn((n, k), |_| rng.random::<f64>() + 1e-3);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Long-tailed mixture batch with `k` classes in `dim` dimensions.
pub fn long_tailed_batch(k: usize, dim: usize, base: usize, seed: u64) -> LabeledDataset {
    let spec = ImbalanceSpec { gamma: 0.1, base_count: base };
    let counts = spec.counts(k).expect("valid spec");
    GaussianMixture::new(k, dim, 1.0, seed)
        .and_then(|g| g.sample(&counts, seed + 1))
        .expect("valid mixture")
}
