//! Command implementations behind the `shapeopt` binary.

pub mod commands;
pub mod config;
pub mod setup;

use thiserror::Error;

/// Exit status for a successful or converged command.
pub const EXIT_OK: i32 = 0;
/// Exit status for configuration, input and I/O errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit status for a stalled run or a failed Taylor test.
pub const EXIT_STALL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}
