//! Library surface of the `rsqs` command-line tool.
//!
//! The binary in `main.rs` is a thin wrapper: argument parsing lives there,
//! while configuration resolution, the binary artifact formats, and the
//! subcommand implementations live here so tests can drive them in-process.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_file;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
