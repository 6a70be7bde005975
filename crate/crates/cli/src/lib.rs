//! Experiment runner for `fedsilo`: configuration files, the `generate`,
//! `train`, `eval` and `gradcheck` commands, and JSON reports.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;

use std::fmt;
use std::path::PathBuf;

pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(fedsilo::Error),
    MissingData(PathBuf),
    Usage(String),
    /// A check ran to completion and failed.
    CheckFailed(String),
}

impl CliError {
    /// Machine-readable code printed as `error[<code>]`.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.code(),
            CliError::MissingData(_) => "missing_data",
            CliError::Usage(_) => "usage",
            CliError::CheckFailed(_) => "check_failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::MissingData(p) => write!(
                f,
                "dataset file {} not found; run `fedsilo generate` first",
                p.display()
            ),
            CliError::Usage(m) | CliError::CheckFailed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<fedsilo::Error> for CliError {
    fn from(e: fedsilo::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
