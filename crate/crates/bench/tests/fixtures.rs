use cwconf_bench::{long_tailed_batch, random_probs, random_scores};

#[test]
fn fixtures_are_seeded_and_well_formed() {
    assert_eq!(random_scores(40, 3), random_scores(40, 3));
    assert!(random_scores(40, 3).iter().all(|s| (0.0..3.0).contains(s)));

    let p = random_probs(20, 7, 1);
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }

    let batch = long_tailed_batch(10, 4, 100, 2);
    let counts = batch.class_counts();
    assert_eq!(counts[0], 100);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
}
