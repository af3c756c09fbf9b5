//! File front end for `markov-geometry`: CSV ingest, command pipelines and
//! JSON reports behind the `mg` binary.

pub mod args;
pub mod commands;
pub mod error;
pub mod io;

use serde_json::Value;

use crate::args::{Cli, Command};
use crate::error::CliError;

/// Runs a parsed command line, writes the report and maps a failed
/// verification to [`CliError::VerifyFailed`].
pub fn execute(cli: &Cli) -> Result<Value, CliError> {
    let (report, destination) = commands::run(&cli.command)?;
    io::save_json(destination.as_deref(), &report)?;
    if let Command::Verify(_) = cli.command {
        let failed = report["results"]["failed"].as_u64().unwrap_or(0) as usize;
        if failed > 0 {
            return Err(CliError::VerifyFailed(failed));
        }
    }
    Ok(report)
}
