//! File formats, run configuration and the command layer behind the `stf`
//! binary. The model itself lives in `stf-core`.

pub mod binary;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod text;

pub use error::{CliError, Result};
