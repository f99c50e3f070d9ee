//! Reproducible experiments on top of `diffreg`: configuration, dataset
//! ingestion, and the train / sample / eval / ablate / oracle commands the
//! `diffreg` binary exposes.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod model;

pub use commands::{cmd_ablate, cmd_eval, cmd_oracle, cmd_sample, cmd_schedule_dump, cmd_train, Ablation, EvalSource};
pub use config::{ArchKind, ExperimentConfig};
pub use error::{CliError, Result};
pub use model::Model;
