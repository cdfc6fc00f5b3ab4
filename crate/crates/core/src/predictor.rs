//! Goal-score predictor: fixed-width observation encoding, goal application
//! through a frozen counterfactual generator, and training on the full
//! population environment.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{dice_diverse, ustun_exact, wachter_gradient, CfRequest, DiceConfig, Generator, WachterConfig};
use crate::checkpoint::{read_file, RecordKind, RecordReader, RecordWriter};
use crate::environment::{Action, EnvConfig, Environment, Observation};
use crate::error::{Error, Result};
use crate::metrics::{gini_index, predictor_reward, CandidateId, RewardParams, StepMetrics};
use crate::recommender::Recommender;
use crate::rlcore::sac::{read_policy, write_policy};
use crate::rlcore::{ActionMode, GaussianPolicy, SacAgent, SacConfig};
use crate::scorer::{FeatureMarginals, ScoreModel};

/// Per-slot width on top of the features: score, elapsed/T, applications,
/// last goal, validity flag.
pub const SLOT_EXTRA: usize = 5;
/// Application counts are divided by this and capped at 1.
pub const APPLICATION_SCALE: f64 = 10.0;

/// Slot count covering the worst-case window population.
pub fn default_slots(config: &EnvConfig) -> usize {
    config.initial_population + config.entrants * config.horizon as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Entries dropped because they did not fit.
    pub truncated: usize,
}

struct SlotSource<'a> {
    id: CandidateId,
    features: &'a [f64],
    score: f64,
    elapsed: u64,
    applications: u32,
    last_goal: Option<f64>,
}

/// Encodes current applicants and the rejection window into `slots` records
/// of width `z + SLOT_EXTRA`, ordered by score descending then id.
pub fn encode_observation(obs: &Observation, z: usize, slots: usize) -> Result<Encoding> {
    let mut entries: BTreeMap<CandidateId, SlotSource> = BTreeMap::new();
    for h in &obs.history {
        entries.insert(
            h.id,
            SlotSource {
                id: h.id,
                features: &h.features,
                score: h.score,
                elapsed: obs.t.saturating_sub(h.last_application),
                applications: h.num_applications,
                last_goal: h.recommendation.as_ref().map(|r| r.goal),
            },
        );
    }
    for a in &obs.applicants {
        entries.insert(
            a.id,
            SlotSource {
                id: a.id,
                features: &a.features,
                score: a.score,
                elapsed: a.previous_application.map_or(0, |p| obs.t.saturating_sub(p)),
                applications: a.num_applications,
                last_goal: a.last_goal,
            },
        );
    }
    let mut list: Vec<SlotSource> = entries.into_values().collect();
    if list.iter().any(|e| e.features.len() != z) {
        return Err(Error::Shape { expected: z, got: list.iter().find(|e| e.features.len() != z).unwrap().features.len() });
    }
    list.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    let truncated = list.len().saturating_sub(slots);
    list.truncate(slots);
    let width = z + SLOT_EXTRA;
    let mut values = vec![0.0; slots * width];
    let mut mask = vec![false; slots];
    let horizon = obs.horizon.max(1) as f64;
    for (k, e) in list.iter().enumerate() {
        let row = &mut values[k * width..(k + 1) * width];
        row[..z].copy_from_slice(e.features);
        row[z] = e.score;
        row[z + 1] = e.elapsed as f64 / horizon;
        row[z + 2] = (f64::from(e.applications) / APPLICATION_SCALE).min(1.0);
        row[z + 3] = e.last_goal.unwrap_or(0.0);
        row[z + 4] = 1.0;
        mask[k] = true;
    }
    Ok(Encoding { values, mask, truncated })
}

/// Frozen counterfactual generator used to turn a goal into
/// recommendations.
#[derive(Debug, Clone)]
pub enum CounterfactualSource {
    Learned(Arc<Recommender>),
    Ustun,
    Wachter(WachterConfig),
    Dice(DiceConfig),
}

impl CounterfactualSource {
    pub fn kind(&self) -> Generator {
        match self {
            CounterfactualSource::Learned(_) => Generator::Ours,
            CounterfactualSource::Ustun => Generator::Ustun,
            CounterfactualSource::Wachter(_) => Generator::Wachter,
            CounterfactualSource::Dice(_) => Generator::Dice,
        }
    }

    /// Counterfactual for `x_f` with score target `goal`, assuming
    /// `M(x_f) < goal`.
    pub fn generate(&self, model: &ScoreModel, x_f: &[f64], goal: f64) -> Result<Vec<f64>> {
        let goal = goal.clamp(1e-9, 1.0 - 1e-9);
        let req = CfRequest::new(model, x_f, goal);
        match self {
            CounterfactualSource::Learned(r) => r.recommend(model, x_f, goal),
            CounterfactualSource::Ustun => match ustun_exact(&req) {
                Err(Error::Infeasible { .. }) => Ok(model.weights.iter().zip(x_f).map(|(&w, &x)| if w > 0.0 { 1.0 } else if w < 0.0 { 0.0 } else { x }).collect()),
                other => other,
            },
            CounterfactualSource::Wachter(c) => Ok(wachter_gradient(&req, c)?.counterfactual),
            CounterfactualSource::Dice(c) => Ok(dice_diverse(&req, c)?.best.counterfactual),
        }
    }
}

/// Recommendations for every rejected candidate at goal `g`. Candidates
/// already at or above the goal keep their features.
pub fn apply_goal(obs: &Observation, goal: f64, model: &ScoreModel, source: &CounterfactualSource) -> Result<Action> {
    let mut action = Action::new();
    for id in &obs.rejected {
        let a = obs
            .applicants
            .iter()
            .find(|a| a.id == *id)
            .ok_or_else(|| Error::Contract(format!("rejected candidate {id} is not an applicant")))?;
        let cf = if a.score >= goal { a.features.clone() } else { source.generate(model, &a.features, goal)? };
        if cf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite counterfactual for candidate {id}")));
        }
        action.insert(*id, (cf, goal));
    }
    Ok(action)
}

/// Goal of the threshold-following baseline: the threshold just computed,
/// or 0.5 when no pool has been thresholded yet.
pub fn trivial_predictor(obs: &Observation) -> f64 {
    if obs.applicants.is_empty() {
        0.5
    } else {
        obs.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub policy: GaussianPolicy,
    pub z: usize,
    pub slots: usize,
}

impl Predictor {
    pub fn goal(&self, obs: &Observation) -> Result<f64> {
        let enc = encode_observation(obs, self.z, self.slots)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (g, _) = self.policy.act(&enc.values, ActionMode::Deterministic, &mut unused)?;
        if !g[0].is_finite() {
            return Err(Error::Divergence("non-finite predictor output".into()));
        }
        Ok(g[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = RecordWriter::new(RecordKind::Predictor);
        w.u32(self.z as u32).u32(self.slots as u32);
        write_policy(&self.policy, &mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = RecordReader::new(bytes, RecordKind::Predictor)?;
        let (z, slots) = (r.u32()? as usize, r.u32()? as usize);
        let policy = read_policy(&mut r)?;
        r.finish()?;
        if policy.obs_dim() != slots * (z + SLOT_EXTRA) || policy.act_dim() != 1 {
            return Err(Error::Checkpoint("predictor record has inconsistent dimensions".into()));
        }
        Ok(Predictor { policy, z, slots })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::scorer::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// How goals are chosen during an evaluation episode.
#[derive(Debug, Clone)]
pub enum GoalPolicy {
    Trivial,
    Learned(Arc<Predictor>),
    Constant(f64),
}

impl GoalPolicy {
    fn goal(&self, obs: &Observation) -> Result<f64> {
        match self {
            GoalPolicy::Trivial => Ok(trivial_predictor(obs)),
            GoalPolicy::Learned(p) => p.goal(obs),
            GoalPolicy::Constant(g) => Ok(*g),
        }
    }
}

/// Sums over the recommendations issued in one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecommendationTotals {
    pub true_cost: f64,
    pub goal_error: f64,
    pub count: usize,
}

/// Per-step metrics of one evaluation episode, plus mean true cost and
/// mean goal error of the issued recommendations.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub steps: Vec<StepMetrics>,
    pub totals: Vec<RecommendationTotals>,
    pub mean_true_cost: Option<f64>,
    pub mean_goal_error: Option<f64>,
    pub truncated_slots: usize,
}

/// Runs one episode with deterministic goal and counterfactual policies.
pub fn run_episode(
    env_config: &EnvConfig,
    model: &Arc<ScoreModel>,
    marginals: &Arc<FeatureMarginals>,
    goals: &GoalPolicy,
    source: &CounterfactualSource,
    reward: &RewardParams,
) -> Result<EpisodeOutcome> {
    let (mut env, mut obs) = Environment::reset(env_config.clone(), Arc::clone(model), Arc::clone(marginals))?;
    let z = model.num_features();
    let slots = match goals {
        GoalPolicy::Learned(p) => p.slots,
        _ => default_slots(env_config),
    };
    let mut steps = Vec::with_capacity(env_config.episode_length as usize);
    let mut totals = Vec::with_capacity(env_config.episode_length as usize);
    let mut truncated_slots = 0;
    while !env.is_done() {
        truncated_slots += encode_observation(&obs, z, slots)?.truncated;
        let g = goals.goal(&obs)?;
        let action = apply_goal(&obs, g, model, source)?;
        let mut tot = RecommendationTotals::default();
        for (id, (cf, goal)) in &action {
            let x = &obs.applicants.iter().find(|a| a.id == *id).expect("rejected applicant").features;
            tot.true_cost += crate::metrics::true_cost(x, cf, &env_config.behavior.difficulties)?;
            if model.score_of(x) < *goal {
                tot.goal_error += (model.score_of(cf) - goal).abs();
            }
            tot.count += 1;
        }
        totals.push(tot);
        let goal_scores: Vec<f64> = action.values().map(|(cf, _)| model.score_of(cf)).collect();
        let (next, ev) = env.step(&action)?;
        let gini = if goal_scores.is_empty() { None } else { gini_index(&goal_scores).ok() };
        steps.push(StepMetrics {
            step: ev.step,
            gini,
            rr: ev.rr,
            rf: ev.rf,
            n_rejected: ev.n_rejected,
            threshold: ev.threshold,
            reward_recommender: 0.0,
            reward_predictor: predictor_reward(ev.rr, ev.rf, reward),
        });
        obs = next;
    }
    let n_cf: usize = totals.iter().map(|t| t.count).sum();
    let avg = |s: f64| if n_cf == 0 { None } else { Some(s / n_cf as f64) };
    let (cost_sum, err_sum) = totals.iter().fold((0.0, 0.0), |(c, e), t| (c + t.true_cost, e + t.goal_error));
    if truncated_slots > 0 {
        log::warn!("observation encoding dropped {truncated_slots} lowest-score entries over the episode");
    }
    Ok(EpisodeOutcome { steps, totals, mean_true_cost: avg(cost_sum), mean_goal_error: avg(err_sum), truncated_slots })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub episodes: usize,
    pub env: EnvConfig,
    pub reward: RewardParams,
    pub sac: SacConfig,
    /// Gradient updates happen every this many environment steps.
    pub update_every: usize,
    pub seed: u64,
    /// Slot count; `None` uses `N0 + m T`.
    pub slots: Option<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            episodes: 1500,
            env: EnvConfig::default(),
            reward: RewardParams::default(),
            sac: SacConfig { gamma: 0.9, actor_lr: 1e-3, critic_lr: 1e-3, batch_size: 128, warmup_steps: 2000, reward_scale: 0.1, ..SacConfig::default() },
            update_every: 1,
            seed: 0,
            slots: None,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_every == 0 {
            return Err(Error::Config("update_every must be >= 1".into()));
        }
        self.env.validate()?;
        self.reward.validate()?;
        self.sac.validate()
    }

    pub fn slot_count(&self) -> usize {
        self.slots.unwrap_or_else(|| default_slots(&self.env))
    }
}

/// Seed of the `i`-th episode environment derived from a base seed.
pub fn episode_seed(base: u64, episode: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode.wrapping_mul(0xBF58_476D_1CE4_E5B9)).rotate_left(17) ^ episode
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEpisode {
    pub episode: usize,
    pub total_reward: f64,
    pub mean_rr: Option<f64>,
    pub mean_rf: Option<f64>,
    pub mean_goal: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        None
    } else {
        Some(s / n as f64)
    }
}

/// Trains the goal policy with the counterfactual generator frozen.
pub fn train_predictor(
    model: &Arc<ScoreModel>,
    marginals: &Arc<FeatureMarginals>,
    source: &CounterfactualSource,
    config: &PredictorConfig,
) -> Result<(Predictor, Vec<TrainingEpisode>)> {
    config.validate()?;
    let z = model.num_features();
    let slots = config.slot_count();
    let mut agent = SacAgent::new(slots * (z + SLOT_EXTRA), vec![0.0], vec![1.0], SacConfig { rng_seed: config.seed, ..config.sac.clone() })?;
    let mut log_rows = Vec::with_capacity(config.episodes);
    let mut step_count = 0usize;
    for episode in 0..config.episodes {
        let env_config = EnvConfig { rng_seed: episode_seed(config.seed, episode as u64), record_events: false, ..config.env.clone() };
        let (mut env, mut obs) = Environment::reset(env_config, Arc::clone(model), Arc::clone(marginals))?;
        let mut enc = encode_observation(&obs, z, slots)?;
        let (mut total, mut rrs, mut rfs, mut goals) = (0.0, Vec::new(), Vec::new(), Vec::new());
        while !env.is_done() {
            let g = agent.explore(&enc.values)?[0];
            let action = apply_goal(&obs, g, model, source)?;
            let (next, ev) = env.step(&action)?;
            let reward = predictor_reward(ev.rr, ev.rf, &config.reward);
            let next_enc = encode_observation(&next, z, slots)?;
            agent.remember(&enc.values, &[g], reward, &next_enc.values, env.is_done())?;
            step_count += 1;
            if step_count % config.update_every == 0 {
                agent.update().map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!("predictor episode {episode}: {msg}")),
                    other => other,
                })?;
            }
            total += reward;
            rrs.extend(ev.rr);
            rfs.extend(ev.rf);
            goals.push(g);
            obs = next;
            enc = next_enc;
        }
        let row = TrainingEpisode {
            episode,
            total_reward: total,
            mean_rr: mean_of(rrs.into_iter()),
            mean_rf: mean_of(rfs.into_iter()),
            mean_goal: mean_of(goals.into_iter()).unwrap_or(0.0),
        };
        if episode % 50 == 49 {
            log::info!(
                "predictor episode {}: reward {:.1}, rr {:?}, rf {:?}, goal {:.3}",
                episode + 1,
                row.total_reward,
                row.mean_rr,
                row.mean_rf,
                row.mean_goal
            );
        }
        log_rows.push(row);
    }
    Ok((Predictor { policy: agent.policy, z, slots }, log_rows))
}
