//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by fallible library entry points.
///
/// Shape violations inside the tape are programming errors and panic
/// instead; `Error` covers conditions a caller can hit with bad data or
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimensions of data, parameters, or configuration disagree.
    Shape(String),
    /// Invalid configuration or degenerate input (empty batch, bad fraction, ...).
    Invalid(String),
    /// A NaN or infinity appeared where only finite values are allowed.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
