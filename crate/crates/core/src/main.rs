//! Command-line front end. Every subcommand reads a JSON experiment
//! configuration and writes its outputs plus `manifest.json` into `--out`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use noisedg::analysis::{spurious_risk, SpuriousRisk};
use noisedg::datagen::{derive_seed, export_dataset, make_cmnist_analogue, LabeledDataset};
use noisedg::experiments::{
    build_datasets, estimate_memo_cost, evaluate_run, run_and_write, run_config, ExperimentConfig, ExperimentKind,
    Manifest, SweepResult, SweepRow,
};
use noisedg::trainer::train;
use noisedg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "noisedg",
    version,
    about = "Label noise and spurious correlation experiments on linear classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Added to every seed of the configuration.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and export the datasets of the first seed.
    Generate(Common),
    /// Train every objective once (first seed, first grid point) and save
    /// models and training histories.
    Train(Common),
    /// Run the experiment named by the configuration.
    Sweep(Common),
    /// Estimate the memorization cost and tabulate closed-form risks.
    Analyze(Common),
    /// Tabulate IRMv1 coefficient curves.
    Curves(Common),
}

enum Failure {
    Config(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Run(other),
        }
    }
}

fn load(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let config = ExperimentConfig::load(&common.config)
        .map_err(|e| Failure::Config(e.to_string()))?
        .with_seed_offset(common.seed_offset);
    config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(config)
}

/// Grid point used by the single-run subcommands.
fn first_point(config: &ExperimentConfig) -> (usize, f64) {
    match config.kind {
        ExperimentKind::NdataSweep => (config.n_grid[0], config.eta),
        _ => (config.n, config.eta_grid.first().copied().unwrap_or(config.eta)),
    }
}

/// Training environments and test set of the first seed.
fn datasets(config: &ExperimentConfig) -> Result<(Vec<LabeledDataset>, LabeledDataset)> {
    let seed = config.seeds[0];
    let (n, eta) = first_point(config);
    if config.kind == ExperimentKind::CmnistAnalogue {
        let c = &config.cmnist;
        let mut envs = make_cmnist_analogue(
            &config.spec,
            c.n_per_env,
            &c.env_gammas,
            c.gamma_test,
            eta,
            derive_seed(seed, 0),
        )?;
        let test = envs.pop().expect("analogue has a test environment");
        return Ok((envs, test));
    }
    let (train_set, test_set) = build_datasets(config, n, eta, seed)?;
    Ok((vec![train_set], test_set))
}

fn generate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let (envs, test) = datasets(config)?;
    let mut files = Vec::new();
    for ds in envs.iter().chain(std::iter::once(&test)) {
        export_dataset(ds, &out.join(&ds.env_id))?;
        files.push(format!("{}/", ds.env_id));
    }
    Manifest::new(config, 0, files).write(&out.join("manifest.json"))
}

fn train_once(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let (envs, test) = datasets(config)?;
    let seed = config.seeds[0];
    let (n, eta) = first_point(config);
    let grid_value = if config.kind == ExperimentKind::NdataSweep {
        n as f64
    } else {
        eta
    };
    let mut result = SweepResult::default();
    let mut files = vec!["raw.csv".to_string()];
    for (k, obj) in config.objectives.iter().enumerate() {
        let (model, history) =
            train(&envs, obj, &run_config(config, seed)).map_err(|e| e.at(format!("objective {}", obj.label())))?;
        let model_file = format!("model_{k}.json");
        let history_file = format!("history_{k}.csv");
        model.save_json(&out.join(&model_file))?;
        history.save_csv(&out.join(&history_file))?;
        files.extend([model_file, history_file]);
        let row = SweepRow::keyed("train", config.kind.grid_param(), grid_value, seed, &obj.label());
        result.rows.push(evaluate_run(row, &model, &envs, &test)?);
    }
    result.write_raw(&out.join("raw.csv"))?;
    Manifest::new(config, result.rows.len(), files).write(&out.join("manifest.json"))
}

#[derive(Serialize)]
struct RiskRow {
    gamma: f64,
    eta: f64,
    risk_spu: f64,
    risk_bayes: f64,
    bayes_leq_spu: bool,
}

fn analyze(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let memo = estimate_memo_cost(config)?;
    std::fs::write(out.join("memo_cost.json"), serde_json::to_string_pretty(&memo)? + "\n")?;
    let mut w = csv::Writer::from_path(out.join("risks.csv"))?;
    for gi in 0..=10 {
        let gamma = 0.5 + 0.05 * gi as f64;
        for ei in 0..10 {
            let eta = 0.05 * ei as f64;
            let SpuriousRisk {
                risk_spu,
                risk_bayes,
                bayes_leq_spu,
            } = spurious_risk(gamma, eta)?;
            w.serialize(RiskRow {
                gamma,
                eta,
                risk_spu,
                risk_bayes,
                bayes_leq_spu,
            })?;
        }
    }
    w.flush()?;
    let files = vec!["memo_cost.json".to_string(), "risks.csv".to_string()];
    Manifest::new(config, 110, files).write(&out.join("manifest.json"))
}

fn curves(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let config = ExperimentConfig {
        kind: ExperimentKind::CoefficientCurves,
        ..config.clone()
    };
    run_and_write(&config, out)
}

type Action = fn(&ExperimentConfig, &Path) -> Result<()>;

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let (common, action): (&Common, Action) = match &cli.command {
        Command::Generate(c) => (c, generate),
        Command::Train(c) => (c, train_once),
        Command::Sweep(c) => (c, run_and_write),
        Command::Analyze(c) => (c, analyze),
        Command::Curves(c) => (c, curves),
    };
    let config = load(common)?;
    std::fs::create_dir_all(&common.out).map_err(Error::from)?;
    action(&config, &common.out)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 1 })
        }
    }
}
