//! Library side of the `coopdrive` binary, so the commands can be driven
//! from tests.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

pub use args::Cli;
pub use commands::run;
pub use error::{exit, CliError, CliResult};
