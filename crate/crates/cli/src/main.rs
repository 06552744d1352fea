mod args;
mod commands;
mod config;
mod heads;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Bad flags, config or files.
const EXIT_USAGE: u8 = 2;
/// Divergence or non-finite numerics.
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<headlab::Error>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Headhunt(a) => commands::headhunt(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Dataset(a) => commands::dataset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
