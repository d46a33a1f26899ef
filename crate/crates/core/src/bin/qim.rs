use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qim::cli::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, CommandError, Grid, Overrides};

#[derive(Parser)]
#[command(name = "qim", version, about = "CNN image classification with a quantum-inspired density-matrix stage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write metrics.csv, epochs.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Baseline plus a filters × size grid, written to ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// e.g. "counts=32,64,128,192;sizes=8,10,12,16"
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every op, the QIM block and tiny networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &Overrides { out, seed }).map(drop),
        Command::Eval { checkpoint, config } => cmd_eval(&checkpoint, &config).map(drop),
        Command::Ablate { config, grid, out, seed } => {
            let grid: Grid = grid.as_deref().unwrap_or("").parse()?;
            cmd_ablate(&config, &grid, &Overrides { out, seed }).map(drop)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed, &[]).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
