use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cwconf_core::data::write_csv;
use cwconf_core::harness::{
    emit_plot_data, prepare_data, prepare_run_dir, read_json, run_ablation, run_eval, run_training, write_json,
    write_rows, AblationAxis, EvalRecord, HarnessError, ResultRow, RunLog, TrainedModel,
};
use cwconf_core::{ExperimentConfig, Objective};

#[derive(Parser)]
#[command(name = "cwconf", version, about = "Class-adaptive conformal training experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set eta=2 --set objective=cact`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Use this directory instead of `output_dir/run-<config hash>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the datasets and write them as CSV.
    GenData,
    /// Train `objective` (or every method given with --methods) for each seed.
    Train {
        /// Comma-separated methods; defaults to the configured objective.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Objective>,
    },
    /// Calibrate and evaluate every trained model of the run.
    Eval,
    /// Sweep one parameter and write a long-format table.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values of the swept parameter.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write the CSVs behind the figures from the run's logs and results.
    Plots,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, HarnessError> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| HarnessError::Config(format!("expected KEY=VALUE, got `{kv}`")))
        })
        .collect()
}

fn model_path(dir: &Path, method: Objective, seed: u64) -> PathBuf {
    dir.join("models").join(format!("{}-seed{seed}.json", method.name()))
}

fn load_models(dir: &Path) -> Result<Vec<TrainedModel>, HarnessError> {
    let models = dir.join("models");
    if !models.is_dir() {
        return Err(HarnessError::MissingModel(models));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&models)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::MissingModel(models));
    }
    paths.iter().map(|p| read_json(p)).collect()
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let base = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let config = base.with_overrides(&parse_overrides(&cli.common.overrides)?)?;
    let dir = prepare_run_dir(&config, cli.common.run_dir.as_deref())?;
    log::info!("run directory {}", dir.display());

    match cli.command {
        Command::GenData => {
            let data = prepare_data(&config)?;
            let out = dir.join("data");
            std::fs::create_dir_all(&out)?;
            for (name, split) in [("train", &data.train), ("val", &data.val), ("cal", &data.cal), ("test", &data.test)] {
                write_csv(split, &out.join(format!("{name}.csv")))?;
            }
            write_json(&data.manifest(&config), &out.join("manifest.json"))?;
            println!("{}", out.display());
        }
        Command::Train { methods } => {
            let methods = if methods.is_empty() { vec![config.objective] } else { methods };
            let data = prepare_data(&config)?;
            std::fs::create_dir_all(dir.join("models"))?;
            for method in methods {
                for &seed in &config.seeds {
                    let model = run_training(&config, &data, method, seed)?;
                    let last = model.log.epochs.last().map_or(f64::NAN, |e| e.loss);
                    println!("{} seed {seed}: final loss {last:.5}", method.name());
                    write_json(&model, &model_path(&dir, method, seed))?;
                }
            }
        }
        Command::Eval => {
            let data = prepare_data(&config)?;
            let mut records: Vec<EvalRecord> = Vec::new();
            for model in load_models(&dir)? {
                records.extend(run_eval(&model.params, &config, &data, model.method, model.seed)?);
            }
            write_json(&records, &dir.join("results.json"))?;
            let rows: Vec<ResultRow> = records.iter().map(ResultRow::from).collect();
            write_rows(&rows, &dir.join("results.csv"))?;
            for r in &rows {
                println!(
                    "{:<10} {:<5} {:<8} alpha={:<5} seed={:<3} cov={:.4} size={:.3} covgap={:.2}",
                    r.method, r.score, r.mode, r.alpha, r.seed, r.coverage, r.size, r.cov_gap
                );
            }
        }
        Command::Ablate { axis, values } => {
            let rows = run_ablation(&config, axis, &values)?;
            let path = dir.join(format!("ablation-{}.csv", axis.name()));
            write_rows(&rows, &path)?;
            println!("{}", path.display());
        }
        Command::Plots => {
            let logs: Vec<RunLog> = load_models(&dir)?.into_iter().map(|m| m.log).collect();
            let results = dir.join("results.json");
            let records: Vec<EvalRecord> = if results.is_file() {
                read_json(&results)?
            } else {
                log::warn!("no results.json in {}; per-class and scatter tables will be empty", dir.display());
                Vec::new()
            };
            let data = prepare_data(&config)?;
            for p in emit_plot_data(&logs, &records, &data.train.class_counts(), &dir.join("plots"))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let HarnessError::Divergence { dump, .. } = &e {
                eprintln!("state: {dump}");
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
