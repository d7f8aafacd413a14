//! `elastodyn`: train, predict and verify physics-informed elastodynamics models.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elastodyn::verify::{Faults, Level};

use commands::{Failure, GridSpec};

#[derive(Parser)]
#[command(name = "elastodyn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a regular space-time grid.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Shear modulus input (surrogate checkpoints only).
        #[arg(long)]
        mu: Option<f64>,
        /// Nodes per spatial axis, e.g. `51,11`.
        #[arg(long, value_delimiter = ',', default_value = "51,11")]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        t_start: f64,
        #[arg(long)]
        t_end: f64,
        #[arg(long, default_value_t = 50)]
        n_times: usize,
        /// Lower box corner (default: the 200 x 10 mm beam).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        lo: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        hi: Option<Vec<f64>>,
    },
    /// Run the self-checks.
    Verify {
        #[arg(long, default_value = "quick")]
        level: Level,
        /// Scales lambda in the exact-solution residual check (fault injection).
        #[arg(long, hide = true)]
        perturb_residual: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::cmd_train(&config),
        Command::Predict {
            checkpoint,
            out,
            mu,
            nodes,
            t_start,
            t_end,
            n_times,
            lo,
            hi,
        } => {
            let grid = GridSpec {
                nodes,
                t_start,
                t_end,
                n_times,
                lo,
                hi,
            };
            commands::cmd_predict(&checkpoint, &grid, mu, &out)
        }
        Command::Verify {
            level,
            perturb_residual,
        } => commands::cmd_verify(
            level,
            Faults {
                residual_prefactor: perturb_residual,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Failure>() {
                Some(Failure::Usage(_)) => ExitCode::from(2),
                Some(Failure::Diverged(_)) => ExitCode::from(3),
                None => ExitCode::from(1),
            }
        }
    }
}
