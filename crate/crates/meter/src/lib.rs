//! Files, configuration and the command-line runner around `meter-core`.

pub mod attention;
pub mod bench;
pub mod commands;
pub mod config;
pub mod io;
pub mod metrics;

pub use commands::{run, CliError, Command};
pub use config::{ConfigError, RunConfig};
