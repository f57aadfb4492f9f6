use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
num_classes = 3
dim = 4
separation = 1.5
gamma = 0.5
train_base_count = 200
test_pool_per_class = 200
hidden = [6]
epochs = 2
batch_size = 200
alpha_train = 0.05
resamples = 2
seeds = [0, 1]
methods = ["ce", "cact"]
"#;

fn cwconf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwconf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn full_run(dir: &Path, run: &str) {
    let base = ["-c", "tiny.toml", "--run-dir", run];
    ok(cwconf(dir, &[&base[..], &["gen-data"]].concat()));
    ok(cwconf(dir, &[&base[..], &["train", "--methods", "ce,cact"]].concat()));
    ok(cwconf(dir, &[&base[..], &["eval"]].concat()));
    ok(cwconf(dir, &[&base[..], &["plots"]].concat()));
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    full_run(tmp.path(), "a");
    let run = tmp.path().join("a");
    for f in [
        "config.toml",
        "data/train.csv",
        "data/test.csv",
        "data/manifest.json",
        "models/ce-seed0.json",
        "models/cact-seed1.json",
        "results.json",
        "results.csv",
        "plots/lambda_trajectory.csv",
        "plots/per_class.csv",
        "plots/scatter.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    // header + 2 methods × 2 seeds × 2 scores
    let rows = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 8);
}

#[test]
fn same_config_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    full_run(tmp.path(), "a");
    full_run(tmp.path(), "b");
    for f in ["results.csv", "models/cact-seed0.json", "plots/per_class.csv", "data/cal.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn default_run_dir_is_keyed_by_config() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let a = ok(cwconf(tmp.path(), &["-c", "tiny.toml", "gen-data"]));
    let b = ok(cwconf(tmp.path(), &["-c", "tiny.toml", "--set", "eta=2", "gen-data"]));
    assert!(a.trim().contains("runs/run-"));
    assert_ne!(a, b);
}

#[test]
fn ablation_writes_long_table() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let out = ok(cwconf(
        tmp.path(),
        &["-c", "tiny.toml", "--run-dir", "r", "--set", "seeds=[0]", "ablate", "--axis", "eta", "--values", "0.5,2"],
    ));
    assert!(out.trim().ends_with("ablation-eta.csv"));
    let table = std::fs::read_to_string(tmp.path().join("r/ablation-eta.csv")).unwrap();
    // 2 values × 2 methods × 2 scores
    assert_eq!(table.lines().count(), 1 + 8);
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    std::fs::write(tmp.path().join("typo.toml"), format!("{TINY}\nlernin_rate = 0.1\n")).unwrap();
    let cases: [&[&str]; 4] = [
        &["-c", "typo.toml", "gen-data"],
        &["-c", "tiny.toml", "--set", "eta=-1", "gen-data"],
        &["-c", "tiny.toml", "--set", "eta", "gen-data"],
        &["-c", "tiny.toml", "--run-dir", "empty", "eval"],
    ];
    for args in cases {
        let out = cwconf(tmp.path(), args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}
