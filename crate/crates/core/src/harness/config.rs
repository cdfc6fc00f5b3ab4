//! Scenario files.
//!
//! A scenario is one TOML file. Top-level keys hold the experimental
//! condition (horizon, beta, reward weights, which generator and goal policy
//! to run); the nested tables hold the detailed settings of each stage.
//! [`ExperimentConfig::resolve`] pushes the condition and the master seed
//! down into the stage settings, so a stage never disagrees with the
//! scenario it belongs to.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{DiceConfig, Generator, WachterConfig};
use crate::environment::EnvConfig;
use crate::error::{Error, Result};
use crate::metrics::RewardParams;
use crate::predictor::PredictorConfig;
use crate::recommender::RecommenderConfig;
use crate::scorer::{DatasetSpec, DEFAULT_EPOCHS, DEFAULT_LR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalChoice {
    Trained,
    Trivial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTraining {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ScorerTraining {
    fn default() -> Self {
        ScorerTraining { epochs: DEFAULT_EPOCHS, lr: DEFAULT_LR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub episodes: usize,
    /// Candidates drawn for the generator comparison table.
    pub comparison_candidates: usize,
    /// Generators listed in the comparison table.
    pub compare: Vec<Generator>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            episodes: 10,
            comparison_candidates: 200,
            compare: vec![Generator::Ours, Generator::Ustun, Generator::Wachter, Generator::Dice],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// `(alpha, tau)` pairs, one trained predictor each.
    pub grid: Vec<(f64, f64)>,
    pub horizons: Vec<u64>,
    pub rr_target: f64,
    pub rr_tolerance: f64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: vec![(1.0, 5.0), (5.0, 5.0), (7.0, 5.0), (10.0, 1.0)],
            horizons: vec![1, 2, 3, 4, 5],
            rr_target: 0.95,
            rr_tolerance: 0.05,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    pub horizon: u64,
    pub beta: f64,
    pub generator: Generator,
    pub goal_policy: GoalChoice,
    pub reward: RewardParams,
    pub dataset: DatasetSpec,
    pub scorer: ScorerTraining,
    pub env: EnvConfig,
    pub recommender: RecommenderConfig,
    pub predictor: PredictorConfig,
    pub wachter: WachterConfig,
    pub dice: DiceConfig,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "default".into(),
            seed: 42,
            horizon: 1,
            beta: 0.05,
            generator: Generator::Ours,
            goal_policy: GoalChoice::Trained,
            reward: RewardParams::default(),
            dataset: DatasetSpec::default(),
            scorer: ScorerTraining::default(),
            env: EnvConfig::default(),
            recommender: RecommenderConfig::default(),
            predictor: PredictorConfig::default(),
            wachter: WachterConfig::default(),
            dice: DiceConfig::default(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Independent seed for a named stage. Kept below 2^63 so resolved configs
/// stay representable as TOML integers.
pub fn stage_seed(master: u64, stage: u64) -> u64 {
    crate::predictor::episode_seed(master ^ 0x5EED_0000_0000_0000, stage) >> 1
}

pub const STAGE_RECOMMENDER: u64 = 2;
pub const STAGE_PREDICTOR: u64 = 3;
pub const STAGE_EVALUATION: u64 = 4;
pub const STAGE_COMPARISON: u64 = 5;
pub const STAGE_DICE: u64 = 6;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse { line, msg: e.message().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Restores the full-size training budgets.
    pub fn apply_full_scale(&mut self) {
        let full = RecommenderConfig::full_scale();
        self.recommender.warmup_episodes = full.warmup_episodes;
        self.recommender.full_episodes = full.full_episodes;
        self.predictor.episodes = 7000;
    }

    /// Copies the scenario condition and derived seeds into every stage and
    /// validates the result.
    pub fn resolve(&mut self) -> Result<()> {
        self.env.horizon = self.horizon;
        self.env.behavior.beta = self.beta;
        self.recommender.behavior = self.env.behavior.clone();
        self.recommender.reward = self.reward.clone();
        self.predictor.env = self.env.clone();
        self.predictor.reward = self.reward.clone();
        self.dataset.rng_seed = self.seed;
        self.recommender.seed = stage_seed(self.seed, STAGE_RECOMMENDER);
        self.recommender.sac.rng_seed = self.recommender.seed;
        self.predictor.seed = stage_seed(self.seed, STAGE_PREDICTOR);
        self.env.rng_seed = stage_seed(self.seed, STAGE_EVALUATION);
        self.dice.seed = stage_seed(self.seed, STAGE_DICE);
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.is_empty() {
            return Err(Error::Config("scenario id must not be empty".into()));
        }
        if self.dataset.num_features != self.env.behavior.difficulties.len() {
            return Err(Error::Config(format!(
                "{} features but {} difficulties",
                self.dataset.num_features,
                self.env.behavior.difficulties.len()
            )));
        }
        if self.scorer.epochs == 0 || !(self.scorer.lr > 0.0) {
            return Err(Error::Config("scorer epochs and lr must be positive".into()));
        }
        if self.sweep.grid.iter().any(|&(a, t)| !(a > 0.0 && t > 0.0)) {
            return Err(Error::Config("sweep grid entries need alpha > 0 and tau > 0".into()));
        }
        if self.sweep.horizons.contains(&0) {
            return Err(Error::Config("sweep horizons must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sweep.rr_target) || !(self.sweep.rr_tolerance >= 0.0) {
            return Err(Error::Config("rr_target must lie in [0, 1] and rr_tolerance be >= 0".into()));
        }
        self.dataset.validate()?;
        self.env.validate()?;
        self.recommender.validate()?;
        self.predictor.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml_str("scenario = \"s\"\nhorizon = 3\n[predictor]\nepisodes = 7\n").unwrap();
        assert_eq!(cfg.horizon, 3);
        assert_eq!(cfg.predictor.episodes, 7);
        assert_eq!(cfg.evaluation.episodes, 10);
    }

    #[test]
    fn unknown_key_reports_line() {
        match ExperimentConfig::from_toml_str("scenario = \"s\"\n\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resolve_propagates_condition() {
        let mut cfg = ExperimentConfig { horizon: 4, beta: 0.01, seed: 9, ..Default::default() };
        cfg.reward.alpha = 2.0;
        cfg.resolve().unwrap();
        assert_eq!(cfg.predictor.env.horizon, 4);
        assert_eq!(cfg.recommender.behavior.beta, 0.01);
        assert_eq!(cfg.predictor.reward.alpha, 2.0);
        let seeds = [cfg.dataset.rng_seed, cfg.recommender.seed, cfg.predictor.seed, cfg.env.rng_seed, cfg.dice.seed];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.resolve().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_condition_is_config_error() {
        let mut cfg = ExperimentConfig { horizon: 0, ..Default::default() };
        assert_eq!(cfg.resolve().unwrap_err().exit_code(), 2);
    }
}
