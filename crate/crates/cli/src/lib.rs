//! Command-line front end: configuration, stage commands and slice export.

pub mod commands;
pub mod config;
pub mod error;
pub mod slices;

pub use commands::Layout;
pub use config::{stage_seed, RunConfig};
pub use error::CliError;
