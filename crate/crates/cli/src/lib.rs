//! Command-line front end for agnet: dataset ingestion, synthetic data,
//! configuration, checkpoints and the train/eval/inspect/visualize commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod synthetic;

pub use error::{CliError, Result};
