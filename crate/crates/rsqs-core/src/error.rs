//! Crate-wide error type.
//!
//! Failures are grouped by what the caller can do about them: `Config`,
//! `Shape`, `Domain`, and `Sampling` indicate a bad request and are
//! recoverable by fixing the inputs; `NonFinite` and `Numeric` indicate the
//! computation itself broke down and the surrounding run should abort.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes (matmul operands, gradient seeds, ...).
    #[error("shape error: {0}")]
    Shape(String),
    /// An argument is outside its mathematical domain (negative probability,
    /// severity out of range, instance too large for an exact solver, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A requested random draw is impossible (not enough classes or items).
    #[error("sampling error: {0}")]
    Sampling(String),
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// Numerical breakdown other than non-finite values (degenerate transport
    /// row, non-finite loss aborting a training step, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// True for errors that should abort a run with a numeric failure status
    /// rather than a configuration failure status.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Numeric(_))
    }
}
