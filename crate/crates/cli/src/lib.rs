//! Experiment harness around the bailout-core library: network builders,
//! the EBA data loader and exposure reconstruction, experiment drivers and
//! their CSV emission.

pub mod config;
pub mod eba;
pub mod experiment;
pub mod ipf;
pub mod kk;

/// Harness-level failures, split by who is to blame: `Config` covers bad
/// inputs (exit code 2), everything else is a runtime or numerical
/// failure (exit code 3).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] bailout_core::error::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
