//! `seqforget`: pretrain a tiny byte-level model until it memorizes its
//! forget batches, derive forgetting thresholds, unlearn, score extraction
//! and render reports. Every command reads and writes one run directory.
//!
//! Exit codes: 0 success, 1 usage or IO error, 2 numerical failure,
//! 3 validation failure.

mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default run directory.
pub const OUT_ENV: &str = "SEQFORGET_OUT";

#[derive(Debug, Parser)]
#[command(name = "seqforget", version, about = "Sequence unlearning experiments on a tiny transformer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// JSON experiment config. Flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Experiment seed; also seeds unlearning.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory. Defaults to the config's `out_dir`, then $SEQFORGET_OUT,
    /// then `./seqforget-out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the corpus and splits, then pretrain until the forget batches are memorized.
    Pretrain(commands::PretrainArgs),
    /// Forgetting thresholds from held-out data, or a published reference.
    Thresholds(commands::ThresholdsArgs),
    /// Unlearn one or more forget batches (several run sequentially).
    Unlearn(commands::UnlearnArgs),
    /// Sample continuations of each target's first half and score them.
    ExtractEval(commands::ExtractArgs),
    /// Summarize the run directory as text, CSV and SVG charts.
    Report(commands::ReportArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use seqforget::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numerical(_) => 2,
                Error::InvalidInput(_) | Error::SequenceTooLong { .. } | Error::SequenceTooShort { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = match &cli.command {
        Command::Pretrain(_) => "pretrain",
        Command::Thresholds(_) => "thresholds",
        Command::Unlearn(_) => "unlearn",
        Command::ExtractEval(_) => "extract-eval",
        Command::Report(_) => "report",
    };
    let g = &cli.global;
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(g, a),
        Command::Thresholds(a) => commands::thresholds(g, a),
        Command::Unlearn(a) => commands::unlearn(g, a),
        Command::ExtractEval(a) => commands::extract_eval(g, a),
        Command::Report(a) => commands::report(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqforget {name}: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
