//! Command-line runs: dataset generation, training, evaluation, latent
//! sweeps and SVG rendering, each reproducible from its resolved config.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use cli::{run, Cli, Command};
pub use config::{ConfigTable, Settings};
pub use error::{CliError, Result, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
