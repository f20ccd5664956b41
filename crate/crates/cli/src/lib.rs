//! Experiment driver: TOML configs in, CSV/JSON results and checkpoints out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use commands::{cmd_continual, cmd_prune, cmd_train, prepare_data, ContinualOutcome};
pub use config::ExperimentConfig;
