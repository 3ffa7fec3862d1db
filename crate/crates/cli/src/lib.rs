//! Command-line experiments for node unlearning: dataset ingestion, training,
//! unlearning, the retrain reference, evaluation and membership inference, with
//! every result written to disk.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Cli};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
