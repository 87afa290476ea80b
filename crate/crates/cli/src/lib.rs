//! Experiment driver: corpus generation, two-stage training, evaluation
//! under babble noise, fusion ablation and reporting.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod results;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
