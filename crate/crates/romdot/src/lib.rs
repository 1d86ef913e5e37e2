//! Command-line driver for `romdot-core`: scenario files, experiment commands
//! and report output.

pub mod commands;
pub mod error;
pub mod io;
pub mod parallel;
pub mod scenario;

pub use error::{CliError, CliResult};
