//! `hnet`: dataset generation, training and the experiment suite.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hnet_core::experiments::{self, ExperimentConfig, ExperimentId, ExperimentReport, RunStatus};

#[derive(Parser, Debug)]
#[command(name = "hnet", version, about = "Hamiltonian networks with integrator-aware losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training set and, for region sampling, a test set.
    GenData(RunArgs),
    /// Train one network per configured method.
    Train(RunArgs),
    /// Score analytic candidates and an optional checkpoint with the loss.
    EvalLoss(RunArgs),
    /// Train on trajectory data and predict past the training horizon.
    Predict(RunArgs),
    /// Loss table of the trained net against H, MH1 and MH2.
    Table1(RunArgs),
    /// Order ladder of the modified-Hamiltonian truncations.
    ImeOrders(RunArgs),
    /// Gradient-symmetry defect of the explicit-Euler target map.
    NtExistence(RunArgs),
    /// Print a preset configuration as JSON.
    Preset {
        /// One of table1, pendulum_predict, kepler_predict, ime_orders, nt_existence.
        experiment: String,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading configuration {}", self.config.display()))?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Option<ExperimentReport>> {
    type Runner = fn(&ExperimentConfig) -> hnet_core::Result<ExperimentReport>;
    let (args, runner): (&RunArgs, Runner) = match &cli.command {
        Command::GenData(a) => (a, experiments::run_generate),
        Command::Train(a) => (a, experiments::run_train),
        Command::EvalLoss(a) => (a, experiments::run_eval_loss),
        Command::Predict(a) => (a, experiments::run_prediction),
        Command::Table1(a) => (a, experiments::run_table1),
        Command::ImeOrders(a) => (a, experiments::run_ime_orders),
        Command::NtExistence(a) => (a, experiments::run_nt_existence),
        Command::Preset { experiment } => {
            let id: ExperimentId = experiment.parse()?;
            println!("{}", ExperimentConfig::preset(id).to_json()?);
            return Ok(None);
        }
    };
    let cfg = args.load()?;
    Ok(Some(runner(&cfg)?))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(report)) => {
            for (key, value) in &report.metrics {
                println!("{key} = {value:e}");
            }
            for path in &report.artifacts {
                println!("wrote {}", path.display());
            }
            if report.status == RunStatus::Ok {
                ExitCode::SUCCESS
            } else {
                for failure in &report.failures {
                    eprintln!("failed: {failure}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
