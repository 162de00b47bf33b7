//! File formats and command-line driver around `hsa_core`: dataset CSV,
//! TOML run configuration, binary checkpoints, attention-map export and
//! run reports.

pub mod attention_map;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod report;

pub use error::{Error, Result};
