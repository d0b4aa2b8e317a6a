//! Batch driver for analog forecasting runs: configuration, pipeline stages
//! and their on-disk artifacts.

use std::fmt;

use analog_core::{Error, ErrorCategory};

pub mod config;
pub mod pipeline;

pub use config::{DistanceKind, FileFormat, RunConfig, Variant};

/// A core error with the stage, file or job it happened in.
#[derive(Debug)]
pub struct CliError {
    pub context: Vec<String>,
    pub error: Error,
}

impl CliError {
    /// Process exit code: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.error.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.context {
            write!(f, "{c}: ")?;
        }
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError {
            context: Vec::new(),
            error,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub trait Context<T> {
    fn context<S: Into<String>>(self, f: impl FnOnce() -> S) -> CliResult<T>;
}

impl<T> Context<T> for std::result::Result<T, Error> {
    fn context<S: Into<String>>(self, f: impl FnOnce() -> S) -> CliResult<T> {
        self.map_err(|e| CliError {
            context: vec![f().into()],
            error: e,
        })
    }
}

impl<T> Context<T> for CliResult<T> {
    fn context<S: Into<String>>(self, f: impl FnOnce() -> S) -> CliResult<T> {
        self.map_err(|mut e| {
            e.context.insert(0, f().into());
            e
        })
    }
}
