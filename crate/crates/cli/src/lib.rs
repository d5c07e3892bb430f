//! Command surface for training and inspecting CRATE-α models.

pub mod config;
pub mod diagnose;
pub mod metrics;
pub mod train;

use crate_alpha_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 usage, 3 data, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Parameter { .. } => 2,
                Error::Data { .. } | Error::Format(_) | Error::Json(_) | Error::Io(_) => 3,
                Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } => 4,
                _ => 1,
            },
            CliError::Io(_) => 1,
        }
    }
}
