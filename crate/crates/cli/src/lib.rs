//! Experiment runner behind the `saliency-audit` binary.

pub mod config;
pub mod dataset;
pub mod emit;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::{run, Command, Session};
