//! `sdopf`: train, evaluate and audit dispatch policies from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::RolloutPolicy;

#[derive(Debug, Parser)]
#[command(name = "sdopf", version, about = "Constrained actor-critic dispatch for multi-period AC OPF with storage")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; every key is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Case file, or `ieee14` / `ieee30` for a bundled case. Overrides the config.
    #[arg(long, global = true)]
    case: Option<String>,
    /// Output directory. Overrides the config.
    #[arg(long, short, global = true, env = "SDOPF_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "SDOPF_THREADS")]
    threads: Option<usize>,
    /// Run parallel sections sequentially. Outputs are identical either way.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy; writes metrics.csv, dual_log.csv, checkpoint/ and summary.json.
    Train {
        /// Training iterations (environment steps). Overrides the config.
        #[arg(long)]
        iterations: Option<usize>,
        /// Trainer seed. Overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll a policy over fresh scenarios; writes eval.csv and eval_summary.json.
    Eval {
        /// Directory holding actor.json from `train` (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Policy to evaluate.
        #[arg(long, value_enum, default_value_t = EvalPolicy::Actor)]
        policy: EvalPolicy,
        /// Number of evaluation steps. Overrides the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Solve the oracle on every episode and report the optimal gap.
        #[arg(long)]
        oracle_gap: bool,
    },
    /// One power-flow solve at nominal demand with mid-range set-points; writes pf.csv.
    Pf,
    /// Perfect-foresight multi-period OPF; writes oracle.csv and oracle_summary.json.
    Oracle {
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Steps per receding block.
        #[arg(long)]
        block: Option<usize>,
        /// Use the case's nominal demand at every step.
        #[arg(long)]
        base_demand: bool,
    },
    /// Step the environment with a fixed policy; writes rollout.csv.
    EnvRollout {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        policy: Option<RolloutPolicy>,
    },
    /// Finite-difference check of every autodiff primitive and the networks; writes gradcheck.csv.
    Gradcheck {
        /// Random instances per operation.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalPolicy {
    /// Trained actor loaded from the checkpoint.
    Actor,
    /// Uniform random action blocks.
    Random,
    /// Oracle actions replayed through the environment.
    Oracle,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, missing files, mismatched checkpoints: exit 1.
    Config(anyhow::Error),
    /// Solver or training breakdown: exit 2.
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::run(&cli.global, &cli.command);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, err) = match &f {
                Failure::Config(e) => ("config error", e),
                Failure::Numerical(e) => ("numerical failure", e),
            };
            eprintln!("sdopf: {kind}: {err:#}");
            ExitCode::from(f.code())
        }
    }
}
