//! Command-line harness: pretraining, fine-tuning, evaluation, sweeps,
//! ablations, attention export, latency benchmarking and synthetic corpora.

pub mod cli;
pub mod commands;
pub mod config;
pub mod output;

pub use commands::run;
pub use config::{RunConfig, Subcommand, SweepAxis, Toggle};
