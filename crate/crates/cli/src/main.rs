//! `deshadow`: train, run and score the shadow-removal model.
//!
//! Exit status is 0 on success, 1 for usage and configuration errors and 2
//! for failures while running.

mod ablate;
mod common;
mod evaluate;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::{exit_code, DATA_ROOT_ENV};

#[derive(Parser, Debug)]
#[command(name = "deshadow", version, about = "Weakly-supervised shadow removal")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a dataset.
#[derive(clap::Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset root in the ISTD layout.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config, or a run manifest.json to repeat a run.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted key, e.g. --set train.seed=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train generator, remover, refiner and discriminator.
    Train(train::TrainArgs),
    /// Remove the shadow from one image.
    Infer(evaluate::InferArgs),
    /// Score a checkpoint on the test split.
    Eval(evaluate::EvalArgs),
    /// Score a checkpoint on videos with a per-pixel maximum reference.
    VideoEval(evaluate::VideoEvalArgs),
    /// Train and score a grid of config variants.
    Ablate(ablate::AblateArgs),
    /// Score a directory of results against ground truth.
    Metrics(evaluate::MetricsArgs),
    /// Write synthetic shadow composites in the ISTD layout.
    Synth(evaluate::SynthArgs),
    /// Print the default config as TOML.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("DESHADOW_LOG")
        .format_timestamp_secs()
        .init();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Infer(a) => evaluate::infer(a),
        Command::Eval(a) => evaluate::eval(a),
        Command::VideoEval(a) => evaluate::video_eval(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Metrics(a) => evaluate::metrics(a),
        Command::Synth(a) => evaluate::synth(a),
        Command::DefaultConfig => {
            print!("{}", deshadow_core::config::Config::default().to_toml_string());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
