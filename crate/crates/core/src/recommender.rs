//! Counterfactual recommender: single-candidate training world, two-phase
//! reward and the online difficulty estimator.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{attainability, success_probability, BehaviorParams};
use crate::checkpoint::{read_file, RecordKind, RecordReader, RecordWriter};
use crate::environment::CHANGE_EPS;
use crate::error::{check_len, Error, Result};
use crate::metrics::{recommender_reward, true_cost, weighted_l1, RewardParams, RewardPhase};
use crate::rlcore::sac::{read_policy, write_policy};
use crate::rlcore::{ActionMode, GaussianPolicy, SacAgent, SacConfig};
use crate::scorer::{logit, FeatureMarginals, ScoreModel};

pub const DEFAULT_BASE_RATE: f64 = 0.05;

/// Online per-feature difficulty estimates with decaying step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEstimator {
    pub estimates: Vec<f64>,
    pub visits: Vec<u64>,
    pub base_rate: f64,
    pub beta: f64,
}

/// What happened to one feature after a recommendation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureOutcome {
    pub attempted: bool,
    pub success: bool,
    pub attainability: f64,
}

impl DifficultyEstimator {
    pub fn new(z: usize, base_rate: f64, beta: f64) -> Self {
        DifficultyEstimator { estimates: vec![0.5; z], visits: vec![0; z], base_rate, beta }
    }

    pub fn rate(&self, i: usize) -> f64 {
        self.base_rate / (1.0 + self.visits[i] as f64)
    }

    pub fn update(&mut self, outcomes: &[FeatureOutcome]) -> Result<()> {
        check_len(self.estimates.len(), outcomes.len())?;
        for (i, o) in outcomes.iter().enumerate() {
            if !o.attempted || !o.attainability.is_finite() {
                continue;
            }
            let p = success_probability(o.attainability, self.estimates[i], self.beta);
            let y = if o.success { 1.0 } else { 0.0 };
            let err = (p - y) * o.attainability;
            self.estimates[i] = (self.estimates[i] + self.rate(i) * err).clamp(0.0, 1.0);
            self.visits[i] += 1;
        }
        Ok(())
    }

    pub fn estimated_cost(&self, x_f: &[f64], x_cf: &[f64]) -> Result<f64> {
        check_len(self.estimates.len(), x_f.len())?;
        check_len(x_f.len(), x_cf.len())?;
        Ok(weighted_l1(x_f, x_cf, &self.estimates))
    }

    /// `Σ |d_i - d̂_i|`.
    pub fn total_error(&self, difficulties: &[f64]) -> f64 {
        self.estimates.iter().zip(difficulties).map(|(e, d)| (e - d).abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderConfig {
    pub max_steps: usize,
    /// Goals are uniform on `(M(x0) + goal_margin, goal_cap)`.
    pub goal_margin: f64,
    pub goal_cap: f64,
    pub warmup_episodes: usize,
    pub full_episodes: usize,
    pub base_rate: f64,
    pub reward: RewardParams,
    pub behavior: BehaviorParams,
    pub sac: SacConfig,
    pub seed: u64,
    /// Replaces every per-feature success probability when set.
    pub force_success: Option<f64>,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        RecommenderConfig {
            max_steps: 10,
            goal_margin: 0.02,
            goal_cap: 0.99,
            warmup_episodes: 1000,
            full_episodes: 4000,
            base_rate: DEFAULT_BASE_RATE,
            reward: RewardParams::default(),
            behavior: BehaviorParams::default(),
            sac: SacConfig { gamma: 0.0, actor_lr: 1e-3, critic_lr: 1e-3, batch_size: 128, reward_scale: 0.1, ..SacConfig::default() },
            seed: 0,
            force_success: None,
        }
    }
}

impl RecommenderConfig {
    /// Episode counts used for full-size runs.
    pub fn full_scale() -> Self {
        RecommenderConfig { warmup_episodes: 3000, full_episodes: 20_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.goal_margin >= 0.0 && self.goal_cap > self.goal_margin && self.goal_cap < 1.0) {
            return Err(Error::Config("need 0 <= goal_margin < goal_cap < 1".into()));
        }
        if let Some(p) = self.force_success {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("force_success {p} outside [0, 1]")));
            }
        }
        self.reward.validate()?;
        self.behavior.validate()?;
        self.sac.validate()
    }
}

/// Policy input: features, goal, current score and the logit gap.
pub fn observation(model: &ScoreModel, x_f: &[f64], goal: f64) -> Vec<f64> {
    let score = model.score_of(x_f);
    let mut obs = Vec::with_capacity(x_f.len() + 3);
    obs.extend_from_slice(x_f);
    obs.push(goal);
    obs.push(score);
    obs.push((logit(goal) - model.logit_of(x_f)).clamp(-10.0, 10.0) / 4.0);
    obs
}

/// Maps an action in `[-1, 1]^z` to a counterfactual inside the unit box.
/// Positive entries move a fraction of the way to 1, negative entries a
/// fraction of the way to 0.
pub fn action_to_counterfactual(x_f: &[f64], action: &[f64]) -> Vec<f64> {
    x_f.iter()
        .zip(action)
        .map(|(&x, &s)| {
            let s = s.clamp(-1.0, 1.0);
            let v = if s > 0.0 { x + s * (1.0 - x) } else { x + s * x };
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Samples an initial candidate and a goal above its score.
pub fn sample_start<R: Rng + ?Sized>(model: &ScoreModel, marginals: &FeatureMarginals, config: &RecommenderConfig, rng: &mut R) -> Result<(Vec<f64>, f64)> {
    for _ in 0..10_000 {
        let x = marginals.sample(rng);
        let lo = model.score_of(&x) + config.goal_margin;
        if lo < config.goal_cap {
            return Ok((x, rng.random_range(lo..config.goal_cap)));
        }
    }
    Err(Error::Config("no candidate below the goal cap after 10000 draws".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub error: f64,
    pub est_cost: f64,
    pub true_cost: f64,
    pub reward: f64,
    pub implemented: usize,
    pub attempted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub goal: f64,
    pub initial_score: f64,
    pub steps: Vec<StepRecord>,
    pub reached: bool,
}

/// Per-episode training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDiagnostics {
    pub episode: usize,
    pub mean_error: f64,
    pub mean_est_cost: f64,
    pub e_diff: f64,
}

/// Rolls out one episode. With `learn` the agent explores, stores
/// transitions and updates after every step; otherwise it acts greedily.
#[allow(clippy::too_many_arguments)]
pub fn run_recommender_episode<R: Rng + ?Sized>(
    agent: &mut SacAgent,
    model: &ScoreModel,
    est: &mut DifficultyEstimator,
    config: &RecommenderConfig,
    phase: RewardPhase,
    start: (Vec<f64>, f64),
    learn: bool,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    let (mut x, goal) = start;
    let initial_score = model.score_of(&x);
    let difficulties = &config.behavior.difficulties;
    let mut steps = Vec::with_capacity(config.max_steps);
    let mut reached = false;
    for step in 0..config.max_steps {
        let obs = observation(model, &x, goal);
        let action = if learn { agent.explore(&obs)? } else { agent.act_deterministic(&obs)? };
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Divergence(format!("non-finite recommender action at step {step}")));
        }
        let x_cf = action_to_counterfactual(&x, &action);
        let error = (model.score_of(&x_cf) - goal).abs();
        let est_cost = est.estimated_cost(&x, &x_cf)?;
        let cost = true_cost(&x, &x_cf, difficulties)?;
        let mut outcomes = Vec::with_capacity(x.len());
        let mut next = x.clone();
        for i in 0..x.len() {
            let attempted = (x_cf[i] - x[i]).abs() > CHANGE_EPS;
            let a = attainability(x[i], x_cf[i]);
            let success = if attempted {
                let p = config.force_success.unwrap_or_else(|| success_probability(a, difficulties[i], config.behavior.beta));
                rng.random::<f64>() < p
            } else {
                true
            };
            if success {
                next[i] = x_cf[i];
            }
            outcomes.push(FeatureOutcome { attempted, success, attainability: a });
        }
        est.update(&outcomes)?;
        let reward = recommender_reward(error, est_cost, &config.reward, phase);
        reached = model.score_of(&next) >= goal;
        let done = reached || step + 1 == config.max_steps;
        if learn {
            agent.remember(&obs, &action, reward, &observation(model, &next, goal), done)?;
            agent.update()?;
        }
        steps.push(StepRecord {
            error,
            est_cost,
            true_cost: cost,
            reward,
            implemented: outcomes.iter().filter(|o| o.attempted && o.success).count(),
            attempted: outcomes.iter().filter(|o| o.attempted).count(),
        });
        x = next;
        if reached {
            break;
        }
    }
    Ok(EpisodeTrace { goal, initial_score, steps, reached })
}

/// Trained recommender: greedy policy plus the difficulty estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub policy: GaussianPolicy,
    pub estimator: DifficultyEstimator,
}

impl Recommender {
    pub fn num_features(&self) -> usize {
        self.estimator.estimates.len()
    }

    /// Deterministic counterfactual for `x_f` targeting `goal`.
    pub fn recommend(&self, model: &ScoreModel, x_f: &[f64], goal: f64) -> Result<Vec<f64>> {
        check_len(self.num_features(), x_f.len())?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (action, _) = self.policy.act(&observation(model, x_f, goal), ActionMode::Deterministic, &mut unused)?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Divergence("non-finite recommender output".into()));
        }
        Ok(action_to_counterfactual(x_f, &action))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = RecordWriter::new(RecordKind::Recommender);
        write_policy(&self.policy, &mut w);
        w.f64s(&self.estimator.estimates);
        w.f64s(&self.estimator.visits.iter().map(|&v| v as f64).collect::<Vec<_>>());
        w.f64(self.estimator.base_rate).f64(self.estimator.beta);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = RecordReader::new(bytes, RecordKind::Recommender)?;
        let policy = read_policy(&mut r)?;
        let estimates = r.f64s()?;
        let visits = r.f64s()?.into_iter().map(|v| v as u64).collect::<Vec<_>>();
        let (base_rate, beta) = (r.f64()?, r.f64()?);
        r.finish()?;
        if estimates.len() != visits.len() || policy.act_dim() != estimates.len() {
            return Err(Error::Checkpoint("recommender record has inconsistent dimensions".into()));
        }
        Ok(Recommender { policy, estimator: DifficultyEstimator { estimates, visits, base_rate, beta } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::scorer::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn new_agent(z: usize, config: &RecommenderConfig) -> Result<SacAgent> {
    SacAgent::new(z + 3, vec![-1.0; z], vec![1.0; z], config.sac.clone())
}

/// Warm-up episodes with the error-only reward, then full episodes with the
/// cost-aware reward. Returns the greedy recommender and per-episode
/// diagnostics.
pub fn train_recommender(model: &ScoreModel, marginals: &FeatureMarginals, config: &RecommenderConfig) -> Result<(Recommender, Vec<EpisodeDiagnostics>)> {
    config.validate()?;
    let z = model.num_features();
    check_len(z, marginals.num_features())?;
    check_len(z, config.behavior.difficulties.len())?;
    let mut agent = new_agent(z, config)?;
    let mut est = DifficultyEstimator::new(z, config.base_rate, config.behavior.beta);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.warmup_episodes + config.full_episodes;
    let mut diagnostics = Vec::with_capacity(total);
    for episode in 0..total {
        let phase = if episode < config.warmup_episodes { RewardPhase::Warmup } else { RewardPhase::Full };
        let start = sample_start(model, marginals, config, &mut rng)?;
        let trace = run_recommender_episode(&mut agent, model, &mut est, config, phase, start, true, &mut rng)
            .map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("episode {episode}: {msg}")),
                other => other,
            })?;
        let n = trace.steps.len() as f64;
        diagnostics.push(EpisodeDiagnostics {
            episode,
            mean_error: trace.steps.iter().map(|s| s.error).sum::<f64>() / n,
            mean_est_cost: trace.steps.iter().map(|s| s.est_cost).sum::<f64>() / n,
            e_diff: est.total_error(&config.behavior.difficulties),
        });
        if episode % 500 == 499 {
            let d = &diagnostics[diagnostics.len() - 500..];
            log::info!(
                "recommender episode {}: mean error {:.4}, est. cost {:.4}, e_diff {:.4}",
                episode + 1,
                d.iter().map(|x| x.mean_error).sum::<f64>() / 500.0,
                d.iter().map(|x| x.mean_est_cost).sum::<f64>() / 500.0,
                est.total_error(&config.behavior.difficulties)
            );
        }
    }
    Ok((Recommender { policy: agent.policy, estimator: est }, diagnostics))
}

pub fn write_diagnostics<W: Write>(rows: &[EpisodeDiagnostics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::DEFAULT_DIFFICULTIES;
    use proptest::prelude::{any, prop_assert, proptest};

    #[test]
    fn estimator_hand_example() {
        let mut est = DifficultyEstimator::new(1, 0.05, 0.05);
        // choose a so that p = 0.3 under d̂ = 0.5: a = -ln(0.7) * 0.5 / 0.05
        let a = -(0.7f64).ln() * 0.5 / 0.05;
        assert!((success_probability(a, 0.5, 0.05) - 0.3).abs() < 1e-12);
        // with a = 2 and p forced to 0.3 the update is 0.5 + 0.05 * (0.3 - 1) * 2
        let manual = (0.5 + 0.05 * (0.3 - 1.0) * 2.0f64).clamp(0.0, 1.0);
        assert!((manual - 0.43).abs() < 1e-12);
        est.update(&[FeatureOutcome { attempted: true, success: true, attainability: a }]).unwrap();
        let expected = 0.5 + 0.05 * (0.3 - 1.0) * a;
        assert!((est.estimates[0] - expected.clamp(0.0, 1.0)).abs() < 1e-12);
        assert_eq!(est.visits, vec![1]);
    }

    #[test]
    fn unattempted_features_untouched() {
        let mut est = DifficultyEstimator::new(2, 0.05, 0.05);
        est.update(&[
            FeatureOutcome { attempted: false, success: false, attainability: 3.0 },
            FeatureOutcome { attempted: true, success: false, attainability: 3.0 },
        ])
        .unwrap();
        assert_eq!(est.estimates[0], 0.5);
        assert_eq!(est.visits, vec![0, 1]);
        assert!(est.estimates[1] > 0.5);
        assert!(est.update(&[]).is_err());
    }

    #[test]
    fn estimated_cost_examples() {
        let est = DifficultyEstimator::new(3, 0.05, 0.05);
        assert_eq!(est.estimated_cost(&[0.2, 0.3, 0.4], &[0.2, 0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(est.estimated_cost(&[0.0, 0.3, 0.4], &[1.0, 0.3, 0.4]).unwrap(), 0.5);
        assert!(est.estimated_cost(&[0.0], &[1.0, 0.3, 0.4]).is_err());
    }

    #[test]
    fn estimated_cost_equals_true_cost_with_true_difficulties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut est = DifficultyEstimator::new(10, 0.05, 0.05);
        est.estimates = DEFAULT_DIFFICULTIES.to_vec();
        for _ in 0..100 {
            let a: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let direct = true_cost(&a, &b, &DEFAULT_DIFFICULTIES).unwrap();
            assert!((est.estimated_cost(&a, &b).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn counterfactual_map_stays_in_box() {
        assert_eq!(action_to_counterfactual(&[0.3, 0.6], &[0.0, 0.0]), vec![0.3, 0.6]);
        assert_eq!(action_to_counterfactual(&[0.3, 0.6], &[1.0, -1.0]), vec![1.0, 0.0]);
        let v = action_to_counterfactual(&[0.2], &[0.5]);
        assert!((v[0] - 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn estimator_sign_and_bounds(
            d0 in 0.0..1.0f64,
            visits in 0u64..50,
            a in 0.0..40.0f64,
            success in any::<bool>(),
        ) {
            let mut est = DifficultyEstimator::new(1, 0.05, 0.05);
            est.estimates[0] = d0;
            est.visits[0] = visits;
            let p = success_probability(a, d0, 0.05);
            let bound = 0.05 * ((p - if success { 1.0 } else { 0.0 }) * a).abs() / (1.0 + visits as f64);
            est.update(&[FeatureOutcome { attempted: true, success, attainability: a }]).unwrap();
            let d1 = est.estimates[0];
            prop_assert!((0.0..=1.0).contains(&d1));
            if success { prop_assert!(d1 <= d0); } else { prop_assert!(d1 >= d0); }
            prop_assert!((d1 - d0).abs() <= bound + 1e-15);
        }
    }
}
