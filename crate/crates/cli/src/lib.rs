//! Library half of the `eptlab` binary: config resolution, the verify suite
//! and the command implementations.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
