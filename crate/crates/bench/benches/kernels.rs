use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cwconf_bench::{long_tailed_batch, random_probs, random_scores};
use cwconf_core::calibration::{calibrate_cluster, calibrate_split, ClusterConfig};
use cwconf_core::objectives::{total_training_loss, ObjectiveConfig, TrainingObjective};
use cwconf_core::scores::{score_aps, smooth_set_size_with_grad};
use cwconf_core::smoothsort::{relaxed_sort, smooth_quantile};
use cwconf_core::{AlmState, ClassifierParams, PenaltyKind, SmoothingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smooth_sorting(c: &mut Criterion) {
    let mut g = c.benchmark_group("smoothsort");
    for m in [125, 250, 500] {
        let s = random_scores(m, 1);
        g.bench_with_input(BenchmarkId::new("relaxed_sort", m), &s, |b, s| {
            b.iter(|| relaxed_sort(black_box(s), 10.0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("smooth_quantile", m), &s, |b, s| {
            b.iter(|| smooth_quantile(black_box(s), 0.01, 10.0).unwrap())
        });
    }
    g.finish();
}

fn soft_sizes(c: &mut Criterion) {
    let probs = random_probs(250, 50, 2);
    let u = vec![0.5; 250];
    let scores = score_aps(probs.view(), &u).unwrap();
    let cfg = SmoothingConfig::default();
    c.bench_function("soft_sizes 250x50", |b| {
        b.iter(|| smooth_set_size_with_grad(black_box(scores.values.view()), 0.9, &cfg))
    });
}

fn cact_step(c: &mut Criterion) {
    let k = 10;
    let batch = long_tailed_batch(k, 10, 100, 3);
    let params = ClassifierParams::new(10, &[64], k, 4);
    let alm = AlmState::new(k, 1e-6, 1.0, 1.2, 10, 1.0).unwrap();
    let objective = TrainingObjective::Cact { alm: &alm, penalty: PenaltyKind::Phr };
    let cfg = ObjectiveConfig::default();
    let n = batch.len().min(250);
    let x = batch.features.slice(ndarray::s![..n, ..]).to_owned();
    let y = &batch.labels[..n];
    c.bench_function("cact loss+grad", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        b.iter(|| total_training_loss(&params, x.view(), y, &objective, &cfg, &mut rng).unwrap())
    });
}

fn calibration(c: &mut Criterion) {
    let k = 50;
    let scores = random_scores(5000, 6);
    let labels: Vec<usize> = (0..scores.len()).map(|i| i % k).collect();
    c.bench_function("calibrate_split 5000", |b| b.iter(|| calibrate_split(black_box(&scores), 0.1).unwrap()));
    let cluster = ClusterConfig::default_for(k, 0.1);
    c.bench_function("calibrate_cluster 5000x50", |b| {
        b.iter(|| calibrate_cluster(black_box(&scores), &labels, k, 0.1, &cluster).unwrap())
    });
}

criterion_group!(benches, smooth_sorting, soft_sizes, cact_step, calibration);
criterion_main!(benches);
