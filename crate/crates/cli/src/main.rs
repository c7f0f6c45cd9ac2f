use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{Axis, EvaluateArgs};
use config::Overrides;

/// A problem with the invocation or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "graphrta", version, about = "Open-set graph domain adaptation by dual reprogramming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target graph pair.
    Generate {
        /// Generator spec as JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one run per seed and write per-seed artifacts.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a target graph.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset_tgt: Option<PathBuf>,
        /// Label file that replaces the target's labels.txt.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Report path; defaults to evaluation.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis over the values listed in the config.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarize a checkpoint or an edit log.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => commands::generate(&spec, &out, seed),
        Command::Train { config, overrides } => commands::train(config.as_deref(), &overrides),
        Command::Evaluate {
            checkpoint,
            config,
            dataset_tgt,
            labels,
            out,
        } => commands::evaluate(EvaluateArgs {
            checkpoint: &checkpoint,
            config: config.as_deref(),
            dataset_tgt,
            labels,
            out,
        }),
        Command::Ablate {
            config,
            axis,
            overrides,
        } => commands::ablate(config.as_deref(), axis, &overrides),
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
