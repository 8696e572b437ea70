//! Command-line driver for `prunekv`.
//!
//! Every subcommand is a plain function in [`commands`] returning a
//! serializable report, so tests and scripts can call them without going
//! through the binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
