//! Experiment orchestration: scenario files, evaluation, sweeps, reports
//! and the command line.

pub mod cli;
pub mod config;
pub mod eval;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, GoalChoice};
pub use eval::{run_evaluation, EvalSetup, Evaluation};
pub use sweep::{pareto_front, run_horizon_study, run_pareto_sweep, ParetoPoint};
