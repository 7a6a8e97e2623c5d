//! Command-line interface for the bigel engine.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use bigel::config::ExperimentConfig;
use bigel::dataio::Dataset;
use bigel::runner;
use bigel::train::TrainResult;

#[derive(Parser)]
#[command(name = "bigel", version, about = "Multi-behavior multi-task recommendation engine")]
struct Cli {
    /// Experiment configuration (TOML); required by all commands except gradcheck.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record the run as deterministic. Runs are bit-reproducible for a fixed
    /// seed either way; the flag is echoed into the log.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (datasets, checkpoints, logs, reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Preprocess a raw interaction log into a split dataset directory.
    Prepare,
    /// Train the full model with validation early stopping.
    Train,
    /// Evaluate the checkpoint in --out on the validation and test splits.
    Evaluate,
    /// Train every ablation variant and report NDCG@5 deltas.
    Ablate,
    /// Grid over one hyperparameter (config: sweep_param, sweep_values).
    Sweep,
    /// Train the configured baseline (mf_bpr or unified_lightgcn).
    Baseline,
    /// Train with a permuted auxiliary-behavior order (config: order_permutation).
    Order,
    /// Verify analytic gradients against finite differences; nonzero exit on failure.
    Gradcheck,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let dir = cfg
        .dataset_dir
        .as_ref()
        .context("config needs dataset_dir pointing at a prepared dataset")?;
    Ok(Dataset::load(dir)?)
}

fn print_train_result(r: &TrainResult) {
    println!(
        "seed {}: {} epochs, best epoch {} (val signal {:.6})",
        r.seed, r.epochs_run, r.best_epoch, r.best_signal
    );
    println!("checkpoint: {}", r.checkpoint_path.display());
    println!("log: {}", r.log_path.display());
    println!("validation:\n{}", r.val_report.render_table());
    println!("test:\n{}", r.test_report.render_table());
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Prepare => {
            let cfg = load_config(cli)?;
            let summary = runner::cmd_prepare(&cfg, &out_dir(cli))?;
            println!("{}", summary.table);
            println!("dataset written to {}", out_dir(cli).display());
        }
        Cmd::Train => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg)?;
            let seed = cfg.seeds[0];
            let result = runner::cmd_train(&cfg, &dataset, &out_dir(cli), seed)?;
            print_train_result(&result);
        }
        Cmd::Evaluate => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg)?;
            let (val, test) = runner::cmd_evaluate(&cfg, &dataset, &out_dir(cli))?;
            println!("validation:\n{}", val.render_table());
            println!("test:\n{}", test.render_table());
            for l in val.machine_lines() {
                println!("val.{l}");
            }
            for l in test.machine_lines() {
                println!("test.{l}");
            }
        }
        Cmd::Ablate => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg)?;
            let report = runner::cmd_ablate(&cfg, &dataset, &out_dir(cli))?;
            println!("{}", report.table);
        }
        Cmd::Sweep => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg)?;
            let report = runner::cmd_sweep(&cfg, &dataset, &out_dir(cli))?;
            println!("{}", report.table);
        }
        Cmd::Baseline => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg)?;
            let seed = cfg.seeds[0];
            let result = runner::cmd_baseline(&cfg, &dataset, &out_dir(cli), seed)?;
            print_train_result(&result);
        }
        Cmd::Order => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg)?;
            let seed = cfg.seeds[0];
            let result = runner::cmd_order(&cfg, &dataset, &out_dir(cli), seed)?;
            print_train_result(&result);
        }
        Cmd::Gradcheck => {
            let seed = cli.seed.unwrap_or(0);
            match runner::cmd_gradcheck(seed) {
                Ok(tables) => println!("{tables}"),
                Err(bigel::Error::GradcheckFailed(tables)) => {
                    println!("{tables}");
                    bail!("gradient check failed");
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
