//! `vericert`: train, verify, attack and evaluate provably robust classifiers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::{DualArgs, DualSourceArg};
use config::ExperimentArgs;

#[derive(Parser)]
#[command(name = "vericert", version, about)]
struct Cli {
    /// Worker threads for evaluation and verification (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct DualFlags {
    #[arg(long, value_enum, default_value = "verifier")]
    dual_source: DualSourceArg,
    /// Subgradient steps for `--dual-source subgradient`.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Base subgradient step size.
    #[arg(long, default_value_t = 0.1)]
    step_size: f64,
}

impl DualFlags {
    fn get(&self) -> DualArgs {
        DualArgs {
            source: self.dual_source,
            steps: self.steps,
            step_size: self.step_size,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Jointly train a predictor and its verifier.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Compute per-example certificates on the test split.
    Verify {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the first N test examples.
        #[arg(long)]
        subset: Option<usize>,
        #[command(flatten)]
        dual: DualFlags,
        /// Refine by subgradient steps and report the bound at each budget
        /// (comma-separated milliseconds, ascending).
        #[arg(long, value_delimiter = ',')]
        time_budget_ms: Option<Vec<f64>>,
        /// Certificates JSON path (default: <out>/certificates.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run PGD against a checkpoint.
    Attack {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        attack_steps: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Nominal, PGD and verified error on the test split.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subset: Option<usize>,
        #[command(flatten)]
        dual: DualFlags,
        #[arg(long)]
        attack_steps: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train once per kappa and tabulate nominal against verified error.
    SweepKappa {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        kappas: Vec<f64>,
        #[command(flatten)]
        dual: DualFlags,
    },
    /// Compare dual bounds against a brute-force search for one example.
    Oracle {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Only this target class (default: every class but the label).
        #[arg(long)]
        target: Option<usize>,
        /// Random samples when the input has more than three dimensions.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Grid points per axis for inputs of dimension three or less.
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[command(flatten)]
        dual: DualFlags,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn with_attack(mut exp: config::ExperimentConfig, steps: Option<usize>, restarts: Option<usize>) -> Result<config::ExperimentConfig> {
    if let Some(s) = steps {
        exp.attack.steps = s;
    }
    if let Some(r) = restarts {
        exp.attack.restarts = r;
    }
    exp.attack.validate()?;
    Ok(exp)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Train { exp } => {
            let cfg = exp.build()?;
            let cref = commands::train_cmd(&cfg)?;
            println!("checkpoint {} sha256 {}", cref.path.display(), cref.sha256);
            Ok(())
        }
        Command::Verify {
            exp,
            checkpoint,
            subset,
            dual,
            time_budget_ms,
            output,
        } => commands::verify_cmd(&exp.build()?, &checkpoint, subset, dual.get(), time_budget_ms, output),
        Command::Attack {
            exp,
            checkpoint,
            subset,
            attack_steps,
            restarts,
            output,
        } => commands::attack_cmd(&with_attack(exp.build()?, attack_steps, restarts)?, &checkpoint, subset, output),
        Command::Eval {
            exp,
            checkpoint,
            subset,
            dual,
            attack_steps,
            restarts,
            output,
        } => commands::eval_cmd(&with_attack(exp.build()?, attack_steps, restarts)?, &checkpoint, subset, dual.get(), output),
        Command::SweepKappa { exp, kappas, dual } => {
            commands::sweep_kappa_cmd(&exp.build()?, &kappas, dual.get())?;
            Ok(())
        }
        Command::Oracle {
            exp,
            checkpoint,
            index,
            target,
            samples,
            resolution,
            dual,
            output,
        } => commands::oracle_cmd(&exp.build()?, &checkpoint, index, target, samples, resolution, dual.get(), output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
