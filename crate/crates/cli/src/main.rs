mod args;
mod commands;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

use args::{merge, Cli, Command};
use commands::{Exit, EXIT_DIVERGED, EXIT_USAGE};

/// Flags merged with the config file; a bad config file is a usage error.
fn settings<T: serde::Serialize + serde::de::DeserializeOwned>(flags: &T, config: Option<&Path>) -> anyhow::Result<T> {
    merge(flags, config).map_err(|e| {
        Exit {
            code: EXIT_USAGE,
            message: format!("{e:#}"),
        }
        .into()
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => commands::cmd_simulate(settings(&a, a.config.as_deref())?),
        Command::Fit(a) => commands::cmd_fit(settings(&a, a.config.as_deref())?),
        Command::Compare(a) => commands::cmd_compare(settings(&a, a.config.as_deref())?),
        Command::Diagnose(a) => commands::cmd_diagnose(settings(&a, a.config.as_deref())?),
        Command::Ingest(a) => commands::cmd_ingest(settings(&a, a.config.as_deref())?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code as u8;
    }
    match err.downcast_ref::<dem_core::Error>() {
        Some(dem_core::Error::Config(_)) => EXIT_USAGE as u8,
        Some(dem_core::Error::Diverged { .. }) => EXIT_DIVERGED as u8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
