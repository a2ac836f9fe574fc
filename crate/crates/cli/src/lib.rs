//! Command-line entry points and the what-if HTTP service.

pub mod commands;
pub mod error;
pub mod service;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
