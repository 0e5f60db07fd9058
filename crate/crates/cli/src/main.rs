//! `cxl`: staged command-line driver. Each subcommand reads the artifacts of
//! the previous stage from the run directory and writes its own there.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cxl_core::aggregator::AggregatorKind;
use cxl_core::cohort::Task;

/// Environment variable that overrides `--out`.
pub const RUN_DIR_ENV: &str = "CXL_RUN_DIR";

#[derive(Debug, Parser)]
#[command(name = "cxl", version, about = "Clinical note encoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Pmv,
    Mortality,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Pmv => Task::Pmv,
            TaskArg::Mortality => Task::Mortality,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignalArg {
    None,
    Keyword,
    Temporal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Bilstm,
    Mean,
}

impl From<MethodArg> for AggregatorKind {
    fn from(m: MethodArg) -> AggregatorKind {
        match m {
            MethodArg::Bilstm => AggregatorKind::BiLstm,
            MethodArg::Mean => AggregatorKind::Mean,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed the stage uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Restricts the stage to one task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Run directory (overridden by CXL_RUN_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic tables with a planted signal into <out>/data.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        patients: usize,
        #[arg(long, value_enum, default_value_t = SignalArg::Keyword)]
        signal: SignalArg,
        /// Sentinel copies per planted note.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Multiplier on note length.
        #[arg(long)]
        length_scale: Option<f64>,
    },
    /// Apply the selection rules, print the exclusion tally, carve the holdout.
    Cohort {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the encoder on notes outside the holdout.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Tune the encoder on single notes for one task and seed.
    MetaFinetune {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-note embeddings for every cohort patient.
    Embed {
        #[command(flatten)]
        common: Common,
    },
    /// Train patient-level aggregators on frozen embeddings.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Only this method (default: all configured methods).
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Score the holdout and write predictions and per-seed metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Collect per-seed metrics into metrics.json and report.txt.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Every stage for every configured task and seed.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match stages::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {line}");
            ExitCode::from(1)
        }
    }
}
