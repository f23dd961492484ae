//! The `edadet` command line: argument handling, run configuration and the
//! six subcommands.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

pub use args::{run, Cli, Command};
pub use config::RunConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<edadet::Error> for CliError {
    fn from(e: edadet::Error) -> Self {
        use edadet::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFiniteLoss { .. } => CliError::Numeric(msg),
            E::Io(_) | E::Json(_) | E::Png(_) | E::Image(_) | E::EmbeddingFile { .. } | E::Checkpoint { .. } | E::Dataset(_) => {
                CliError::Io(msg)
            }
            _ => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
