//! Library side of the `gpreg` command: curve files, run configuration and
//! the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
pub use io::{load_curves, read_curves, Curves};
