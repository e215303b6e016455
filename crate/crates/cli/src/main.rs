use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use postmask_core::{Error, ErrorClass};

mod commands;
mod config;

/// Mask-based post-filtering of coded speech.
#[derive(Debug, Parser)]
#[command(name = "postmask", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON-lines manifest of clean/coded pairs.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// TOML file with [pipeline] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling, dropout and surrogate coding.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving reports, models and the run header.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for per-utterance work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mask-value distribution per coded source.
    Stats(commands::StatsArgs),
    /// Oracle enhancement with bounded ideal masks and the cepstral baseline.
    Oracle(commands::OracleArgs),
    /// Train a mask estimator on the train/val splits.
    Train(commands::TrainArgs),
    /// Enhance one coded WAV file.
    Enhance(commands::EnhanceArgs),
    /// Score systems on one split.
    Eval(commands::EvalArgs),
    /// Write surrogate-coded WAVs and a paired manifest.
    Degrade(commands::DegradeArgs),
    /// Generate a seeded synthetic speech corpus with a manifest.
    Synth(commands::SynthArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let c = &cli.common;
    let result = match &cli.command {
        Command::Stats(a) => commands::stats(c, a),
        Command::Oracle(a) => commands::oracle(c, a),
        Command::Train(a) => commands::train(c, a),
        Command::Enhance(a) => commands::enhance(c, a),
        Command::Eval(a) => commands::eval(c, a),
        Command::Degrade(a) => commands::degrade(c, a),
        Command::Synth(a) => commands::synth(c, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
