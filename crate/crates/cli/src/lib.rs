//! Command-line pipeline around the `promptforge` library: configuration,
//! the per-stage commands, and the hyper-parameter sweep.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
