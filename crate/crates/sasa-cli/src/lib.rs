//! Operator-facing harness around the `sasa` library: NDJSON datasets
//! with JSON sidecar metadata, strict JSON run configs, CSV reports,
//! and the four subcommands (`gen-data`, `train`, `eval`,
//! `export-structure`).

pub mod commands;
pub mod io;
pub mod log;

use std::fmt;

/// Command errors carrying their exit code: invalid input or
/// configuration exits 2, runtime failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(msg) => write!(f, "invalid input: {msg}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sasa::Error> for CliError {
    fn from(err: sasa::Error) -> Self {
        match err {
            sasa::Error::Shape(m) | sasa::Error::Invalid(m) => CliError::Invalid(m),
            sasa::Error::NonFinite(m) => CliError::Runtime(format!("non-finite value: {m}")),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
