mod args;
mod commands;
mod files;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing flags, caught before any work.
    Usage(String),
    Core(hsivar_core::Error),
}

impl From<hsivar_core::Error> for CliError {
    fn from(e: hsivar_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 2 flags and config values, 3 malformed files, 4 checkpoint mismatch.
    pub fn exit_code(&self) -> u8 {
        use hsivar_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::Parameter(_) | E::Taxonomy(_)) => 2,
            CliError::Core(E::Format { .. }) => 3,
            CliError::Core(E::Checkpoint { .. }) => 4,
            CliError::Core(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
