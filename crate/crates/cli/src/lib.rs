//! Experiment harness: configuration parsing, scenario dispatch and artifact output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

pub use config::{parse_config, ConfigErrors, ExperimentConfig, Scenario};
pub use run::{run, RunError, RunOutcome, EXIT_ASSERTION, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PASS};
