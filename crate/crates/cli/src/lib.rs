//! Command-line front end: configuration files, mode dispatch and charts.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use commands::{dispatch, Cli, Mode};
pub use error::CliError;
