//! File formats, configuration, checkpoints and commands for the
//! quantum-attention routing agent built on `qroute-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod instances;
pub mod metrics;
pub mod plot;

pub use error::{Error, Result};
