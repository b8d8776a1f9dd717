//! Experiment orchestration: pretraining, adversarial training per method,
//! epsilon grid search, robustness sweeps and attack-efficiency tables,
//! aggregated over seeds with Student-t confidence intervals.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;
pub mod stats;

pub use config::{ExperimentPlan, Method, Profile};
pub use experiments::{Arm, EvalReport, SeedEval};
pub use stats::SeedSummary;
