//! Command-line front end for the retrieve-plan-generate engine: config
//! files, JSONL I/O and HTTP clients for remote backends.

pub mod commands;
pub mod config;
pub mod http;
pub mod io;

pub use commands::{run, Cli, CliError};
