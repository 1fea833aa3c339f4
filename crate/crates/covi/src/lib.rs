//! Config files, CSV artifacts, checkpoint files and the `covi` command
//! line, on top of `covi-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod csv;
pub mod error;
pub mod oracles;

pub use error::CliError;
