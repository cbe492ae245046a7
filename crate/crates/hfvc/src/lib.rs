//! File formats, experiment sweeps and command implementations for the
//! `hfvc` tool, built on `hfvc-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod mushra;
pub mod sweep;

pub use error::{CliError, CliResult};
