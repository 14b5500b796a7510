mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use k3m::corruption::CorruptionKind;
use k3m::tasks::Task;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),

    #[error(transparent)]
    Core(#[from] k3m::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(k3m::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "k3m", version, about = "Knowledge-aware multi-modal pretraining and robustness sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a corpus; writes the corpus, its manifest and a balanced split.
    Corrupt {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kind: CorruptionKind,
        /// Percentage of each class to corrupt.
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=100))]
        ratio: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the configured corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune one task, optionally on a corrupted corpus.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long, requires = "ratio")]
        kind: Option<CorruptionKind>,
        #[arg(long, requires = "kind", value_parser = clap::value_parser!(u32).range(0..=100))]
        ratio: Option<u32>,
    },
    /// Finetune and test every (kind, ratio) of the sweep; appends metrics.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretrained checkpoint; pretrains per seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
    },
    /// One CSV and one SVG per (task, kind, metric) from a metrics file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
