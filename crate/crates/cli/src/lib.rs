//! Command-line frontend for the separable-convolution frame interpolator:
//! argument parsing, run configuration, image and dataset I/O, and the
//! weights container.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod weights;

pub use commands::{run, Cli, Command};
pub use error::{CliError, CliResult};
