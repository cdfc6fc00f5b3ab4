//! Time-aware algorithmic recourse in competitive, limited-resource settings.
//!
//! The crate bundles a population simulator where candidates compete for
//! `k` slots per step and react to counterfactual recommendations, a small
//! soft actor-critic learner used to train a counterfactual recommender and
//! a goal-score predictor, classical counterfactual baselines, and the
//! experiment harness behind the `recourse` command line tool.

pub mod baselines;
pub mod behavior;
pub mod checkpoint;
pub mod environment;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod predictor;
pub mod recommender;
pub mod rlcore;
pub mod scorer;

pub use error::{Error, Result};
