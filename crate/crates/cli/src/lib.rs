//! Batch front end for the `isnet` binary: configuration, subcommands and
//! the experiment harness.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod table;

pub use error::{CliError, CliResult};
