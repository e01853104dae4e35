//! The `dgcw` command-line tool: configuration, the six commands and the
//! gradient-check suites they run.

pub mod alloc;
pub mod commands;
pub mod config;
pub mod suites;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or values, unreadable inputs, unwritable
    /// outputs.
    #[error("{0}")]
    Usage(String),
    /// Divergence, gradient-check failure or a naive/fused mismatch.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<dgcw_core::Error> for CliError {
    fn from(e: dgcw_core::Error) -> Self {
        match e {
            dgcw_core::Error::Diverged { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
