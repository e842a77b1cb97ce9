//! `sdr`: generate datasets, fit SDR models, project new points, run the
//! SDR-GP pipeline and sweep hyperparameters.
//!
//! Failures print one line `error[<kind>]: <message>` to stderr and exit with
//! 2 (usage), 3 (data) or 4 (numerical failure).

mod args;
mod commands;
mod config;
mod output;
mod sweep;

use std::process::ExitCode;

use clap::Parser;
use sdr_core::ErrorKind;

use args::{Cli, Command};

/// Error carrying the exit-code family.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }

    fn tag(&self) -> &'static str {
        match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

impl From<sdr_core::Error> for CliError {
    fn from(e: sdr_core::Error) -> Self {
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return clap_failure(e),
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Fit(a) => commands::fit(a),
        Command::Project(a) => commands::project(a),
        Command::Gp(a) => commands::gp(a),
        Command::Sweep(a) => sweep::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.message.replace('\n', " ");
            eprintln!("error[{}]: {line}", e.tag());
            ExitCode::from(e.code())
        }
    }
}

/// Help and version go to stdout with status 0; anything else is a usage
/// error whose first line keeps the machine-readable prefix.
fn clap_failure(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind as K;
    if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
        print!("{e}");
        return ExitCode::SUCCESS;
    }
    let text = e.render().to_string();
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
    for line in lines {
        eprintln!("{line}");
    }
    ExitCode::from(2)
}
