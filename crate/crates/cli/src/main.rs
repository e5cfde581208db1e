use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{eval, gradcheck, infer, synth, train};

/// Vessel segmentation with channel and spatial attention.
///
/// Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
/// 3 numeric abort.
#[derive(Parser, Debug)]
#[command(name = "cs2net", version, about, long_about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). `RUST_LOG` also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic vessel dataset with a manifest.
    Synth(synth::Args),
    /// Train from a config file, optionally with k-fold cross-validation.
    Train(train::Args),
    /// Predict probability maps and masks with a checkpoint.
    Infer(infer::Args),
    /// Score predictions against ground truth.
    Eval(eval::Args),
    /// Finite-difference gradient checks over every block.
    Gradcheck(gradcheck::Args),
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<cs2net::Error> for Failure {
    fn from(e: cs2net::Error) -> Self {
        let code = if e.is_numeric() { 3 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::usage(format!("config {e}"))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Infer(a) => infer::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
