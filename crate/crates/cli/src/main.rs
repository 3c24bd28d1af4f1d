//! `hemf`: fit, stream, split, predict, eval and synth from the command line.
//!
//! Exit codes: 0 ok, 2 bad input or configuration, 3 numerical failure.

mod commands;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hemf::data::RatingFormat;
use hemf::HemfError;

#[derive(Debug, Parser)]
#[command(name = "hemf", version, about = "Heterogeneous matrix factorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// key = value file; flags win over its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Leave wall_ms empty so identical runs give identical files
    #[arg(long)]
    pub no_timing: bool,
    /// Rating file grammar: csv, double_colon or per_item_files
    #[arg(long, default_value = "csv")]
    pub format: RatingFormat,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Batch fit, optionally with empirical-Bayes updates
    Fit(commands::FitArgs),
    /// Streaming fit (online HeMF or the SGD baseline)
    Stream(commands::StreamArgs),
    /// Split a rating file into train and test files
    Split(commands::SplitArgs),
    /// Predict ratings for user,item pairs from a checkpoint
    Predict(commands::PredictArgs),
    /// RMSE of a checkpoint on a rating file
    Eval(commands::EvalArgs),
    /// Sample a rating file from the generative model
    Synth(commands::SynthArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().find_map(|e| e.downcast_ref::<HemfError>()).is_some_and(HemfError::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

/// The error chain joined with `: `, skipping causes a layer already printed
/// (core errors include their source in their own message).
fn message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Stream(a) => commands::stream(a),
        Command::Split(a) => commands::split(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", message(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
