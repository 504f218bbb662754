//! Command-line harness for the cross-scale context aggregation block:
//! tensor files, run configuration, detection text files and the
//! subcommands built on them.

pub mod boxes;
pub mod commands;
pub mod config;
pub mod error;
pub mod tensor_file;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
