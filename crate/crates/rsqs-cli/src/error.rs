//! CLI error type and the exit-code contract.
//!
//! Exit codes are stable for scripting: 0 on success, 2 for configuration or
//! validation problems (bad flags, missing files, malformed formats), 3 when
//! the numerics themselves broke down (non-finite losses, degenerate
//! transport).

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] rsqs_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    /// The process exit code this error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}
