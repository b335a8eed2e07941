use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use keystep_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "keystep", version, about = "Global-to-local trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene file (JSON lines).
    GenData {
        /// Synthetic generator config (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Scenes as JSON lines, or an ETH/UCY text file (`.txt`).
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON) overlaid on the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "nuscenes", value_parser = ["nuscenes", "ethucy"])]
        preset: String,
        /// Print the mean loss of every epoch to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint and optional baselines.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Any of cv, recursive, kalman, simultaneous.
        #[arg(long, value_delimiter = ',')]
        baseline: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 2.0)]
        mr_threshold: f64,
    },
    /// Forecast one agent from its observed past.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Observed points as `x,y;x,y;...`, oldest first.
        #[arg(long, allow_hyphen_values = true)]
        past: String,
        #[arg(long, default_value = "true", action = ArgAction::Set)]
        prune: bool,
    },
    /// Export per-step error curves as CSV.
    Curves {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Heads to decode with; defaults to every head the checkpoint trained.
        #[arg(long, value_delimiter = ',')]
        heads: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail(1, "usage", first);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            fail(code, e.kind(), &e.to_string())
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
