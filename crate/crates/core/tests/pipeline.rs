use cwconf_core::calibration::{calibrate_split, predict_sets};
use cwconf_core::data::{load_csv, write_csv, CsvSchema};
use cwconf_core::harness::{
    prepare_data, run_ablation, run_eval, run_experiment, run_training, AblationAxis, CpMode, Objective,
};
use cwconf_core::model::softmax;
use cwconf_core::scores::compute_scores;
use cwconf_core::{ExperimentConfig, PenaltyKind, ScoreKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        num_classes: 4,
        dim: 5,
        separation: 1.5,
        gamma: 0.5,
        train_base_count: 300,
        test_pool_per_class: 250,
        hidden: vec![8],
        epochs: 3,
        batch_size: 250,
        alpha_train: 0.05,
        resamples: 2,
        methods: vec![Objective::Ce, Objective::Cact],
        ..ExperimentConfig::default()
    }
}

/// Under exchangeability the rank of a test score among the calibration
/// scores is uniform on {1, …, m+1}.
#[test]
fn test_score_rank_is_uniform() {
    let cfg = ExperimentConfig {
        gamma: 1.0,
        ..small()
    };
    let data = prepare_data(&cfg).unwrap();
    let params = run_training(&cfg, &data, Objective::Ce, 0).unwrap().params;
    let pool = data.cal.concat(&data.test).unwrap();
    let probs = softmax(params.forward(pool.features.view()).unwrap().view());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores = compute_scores(probs.view(), ScoreKind::Aps, true, &mut rng).unwrap();
    let truth = scores.true_label_scores(&pool.labels);

    let m = 19;
    let reps = 4000;
    let mut hist = vec![0usize; m + 1];
    for _ in 0..reps {
        let mut pick: Vec<usize> = Vec::with_capacity(m + 1);
        while pick.len() < m + 1 {
            let i = rng.random_range(0..pool.len());
            if !pick.contains(&i) {
                pick.push(i);
            }
        }
        let test = truth[pick[m]];
        let rank = pick[..m].iter().filter(|&&i| truth[i] < test).count();
        hist[rank] += 1;
    }
    // chi-square with 19 degrees of freedom; 43.8 is the 0.999 quantile
    let expected = reps as f64 / (m + 1) as f64;
    let chi2: f64 = hist.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 43.8, "chi2 = {chi2}, histogram {hist:?}");
}

#[test]
fn split_cp_on_trained_model_covers() {
    let cfg = ExperimentConfig {
        gamma: 1.0,
        ..small()
    };
    let data = prepare_data(&cfg).unwrap();
    let params = run_training(&cfg, &data, Objective::Ce, 1).unwrap().params;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cal_probs = softmax(params.forward(data.cal.features.view()).unwrap().view());
    let test_probs = softmax(params.forward(data.test.features.view()).unwrap().view());
    let cal = compute_scores(cal_probs.view(), ScoreKind::Thr, false, &mut rng).unwrap();
    let test = compute_scores(test_probs.view(), ScoreKind::Thr, false, &mut rng).unwrap();
    let th = calibrate_split(&cal.true_label_scores(&data.cal.labels), 0.1).unwrap();
    let sets = predict_sets(test.values.view(), &th).unwrap();
    let hits = sets.iter().zip(&data.test.labels).filter(|(s, y)| s.contains(y)).count();
    let cov = hits as f64 / sets.len() as f64;
    // 1000 test points: 4σ ≈ 0.04
    assert!(cov > 0.86, "coverage {cov}");
}

#[test]
fn experiment_is_deterministic() {
    let cfg = small();
    let data = prepare_data(&cfg).unwrap();
    let a = run_experiment(&cfg, &data).unwrap();
    let b = run_experiment(&cfg, &data).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.logs.len(), 2);
    assert_eq!(a.records.len(), 2 * cfg.scores.len());
}

#[test]
fn cact_log_tracks_multipliers() {
    let cfg = ExperimentConfig {
        epochs: 4,
        rho_period: 2,
        ..small()
    };
    let data = prepare_data(&cfg).unwrap();
    let m = run_training(&cfg, &data, Objective::Cact, 0).unwrap();
    let first = &m.log.epochs[0];
    assert_eq!(first.lambda, vec![cfg.lambda0; 4]);
    assert_eq!(first.rho, vec![cfg.rho0; 4]);
    for e in &m.log.epochs {
        assert!(e.d_hat.iter().all(Option::is_some));
        assert!(e.val_threshold.is_some_and(f64::is_finite));
        assert!(e.lambda.iter().all(|&l| l >= cwconf_core::alm::LAMBDA_FLOOR));
    }
}

#[test]
fn frozen_multipliers_stay_put() {
    let cfg = ExperimentConfig {
        freeze_multipliers: true,
        lambda0: 0.3,
        ..small()
    };
    let data = prepare_data(&cfg).unwrap();
    for method in [Objective::Cact, Objective::CactHr] {
        let m = run_training(&cfg, &data, method, 0).unwrap();
        let expect = if method == Objective::Cact { cfg.lambda0 } else { cfg.hr_lambda0 };
        for e in &m.log.epochs {
            assert_eq!(e.lambda, vec![expect; 4]);
        }
    }
}

#[test]
fn every_method_trains() {
    let cfg = ExperimentConfig { epochs: 2, ..small() };
    let data = prepare_data(&cfg).unwrap();
    for method in Objective::ALL {
        let m = run_training(&cfg, &data, method, 0).unwrap();
        assert!(m.log.epochs.iter().all(|e| e.loss.is_finite()), "{}", method.name());
    }
}

#[test]
fn ablation_tables() {
    let cfg = ExperimentConfig {
        epochs: 2,
        methods: vec![Objective::Ce, Objective::Conftr],
        seeds: vec![0],
        ..small()
    };
    let values: Vec<String> = ["0.5", "1.0", "2.0"].map(String::from).to_vec();
    let rows = run_ablation(&cfg, AblationAxis::Eta, &values).unwrap();
    for method in ["ce", "conftr"] {
        let n = rows.iter().filter(|r| r.method == method && r.score == "thr").count();
        assert_eq!(n, 3, "{method}");
    }

    let alphas: Vec<String> = ["0.05", "0.1", "0.2"].map(String::from).to_vec();
    let rows = run_ablation(&cfg, AblationAxis::AlphaTest, &alphas).unwrap();
    assert_eq!(rows.len(), 2 * 3 * cfg.scores.len());
    // one trained model per method: smaller α never gives smaller sets
    for method in ["ce", "conftr"] {
        let sizes: Vec<f64> = alphas
            .iter()
            .map(|a| rows.iter().find(|r| r.method == method && r.score == "thr" && &r.value == a).unwrap().size)
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{method}: {sizes:?}");
    }

    let rows = run_ablation(&cfg, AblationAxis::PenaltyKind, &["phr".into(), "p2".into()]).unwrap();
    assert_eq!(rows.len(), 2 * 2 * cfg.scores.len());
    assert!(run_ablation(&cfg, AblationAxis::AlphaTest, &["abc".into()]).is_err());
}

#[test]
fn gamma_ablation_keeps_held_out_splits() {
    let base = small();
    let a = prepare_data(&ExperimentConfig { gamma: 0.1, ..base.clone() }).unwrap();
    let b = prepare_data(&ExperimentConfig { gamma: 1.0, ..base }).unwrap();
    assert_eq!(a.cal, b.cal);
    assert_eq!(a.test, b.test);
    assert_eq!(a.val, b.val);
    assert!(a.train.len() < b.train.len());
}

#[test]
fn csv_round_trip_feeds_the_harness() {
    let cfg = small();
    let data = prepare_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let pool = dir.path().join("pool.csv");
    write_csv(&data.train, &train).unwrap();
    write_csv(&data.cal.concat(&data.test).unwrap(), &pool).unwrap();
    let (loaded, table) = load_csv(&train, &CsvSchema::new("label")).unwrap();
    assert_eq!(table, vec![0, 1, 2, 3]);
    assert_eq!(loaded.labels, data.train.labels);

    let csv_cfg = ExperimentConfig {
        train_csv: Some(train.display().to_string()),
        test_csv: Some(pool.display().to_string()),
        ..cfg
    };
    let from_csv = prepare_data(&csv_cfg).unwrap();
    assert_eq!(from_csv.train.class_counts(), data.train.class_counts());
    let m = run_training(&csv_cfg, &from_csv, Objective::Ce, 0).unwrap();
    let recs = run_eval(&m.params, &csv_cfg, &from_csv, Objective::Ce, 0).unwrap();
    assert_eq!(recs.len(), csv_cfg.scores.len());
}

#[test]
fn label_and_cluster_modes_evaluate() {
    let cfg = ExperimentConfig {
        cp_modes: vec![CpMode::Label, CpMode::Cluster],
        clusters: Some(2),
        penalty: PenaltyKind::P3,
        ..small()
    };
    let data = prepare_data(&cfg).unwrap();
    let m = run_training(&cfg, &data, Objective::Ce, 0).unwrap();
    let recs = run_eval(&m.params, &cfg, &data, Objective::Ce, 0).unwrap();
    assert_eq!(recs.len(), 2 * cfg.scores.len());
    for r in &recs {
        assert_eq!(r.report.per_class.len(), 4);
        let sizes = r.report.per_class.iter().map(|c| c.avg_size).sum::<f64>();
        assert!(sizes > 0.0);
    }
}
