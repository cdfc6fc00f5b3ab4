//! Competitive recourse simulator.
//!
//! Each step: the applicant pool is scored, exactly `k` applicants are
//! accepted, and every rejected applicant receives a counterfactual with a
//! goal score. On the transition, accepted candidates leave, rejected ones
//! either drop out (one draw at recommendation receipt) or start working on
//! their recommendation, and a new pool forms from fresh entrants plus
//! candidates who decide to reapply.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{self, BehaviorParams, GapState};
use crate::error::{Error, Result};
use crate::metrics::{self, CandidateId};
use crate::scorer::{FeatureMarginals, ScoreModel};

/// Feature changes at or below this magnitude count as "no change".
pub const CHANGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Applying,
    Waiting,
    Accepted,
    Dropped,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Accepted | Status::Dropped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub counterfactual: Vec<f64>,
    pub goal: f64,
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: CandidateId,
    /// Current (latent) features.
    pub features: Vec<f64>,
    /// Features as seen at the most recent application.
    pub applied_features: Vec<f64>,
    pub last_application: u64,
    pub num_applications: u32,
    /// Step of the most recent rejection, if any.
    pub rejected_at: Option<u64>,
    /// Active recommendation; present exactly while waiting.
    pub recommendation: Option<Recommendation>,
    /// Most recent recommendation ever received, kept after reapplying.
    pub last_recommendation: Option<Recommendation>,
    pub implemented: Vec<bool>,
    pub status: Status,
}

impl Candidate {
    fn fully_implemented(&self) -> bool {
        self.implemented.iter().all(|&b| b)
    }
}

/// Forces selected random outcomes, for oracle worlds and enumeration tests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub success_probability: Option<f64>,
    pub dropout_probability: Option<f64>,
    pub reapply_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub initial_population: usize,
    pub acceptances: usize,
    pub entrants: usize,
    pub horizon: u64,
    pub episode_length: u64,
    pub behavior: BehaviorParams,
    pub rng_seed: u64,
    #[serde(default)]
    pub overrides: Overrides,
    /// Keep a structured event log (costly in training loops).
    #[serde(default)]
    pub record_events: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            initial_population: 20,
            acceptances: 9,
            entrants: 10,
            horizon: 1,
            episode_length: 100,
            behavior: BehaviorParams::default(),
            rng_seed: 0,
            overrides: Overrides::default(),
            record_events: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.acceptances == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.acceptances >= self.initial_population + self.entrants {
            return Err(Error::Config(format!(
                "k ({}) must be smaller than N0 + m ({})",
                self.acceptances,
                self.initial_population + self.entrants
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("validity horizon T must be >= 1".into()));
        }
        self.behavior.validate()
    }
}

/// Result of thresholding one applicant pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    pub threshold: f64,
    pub accepted: Vec<CandidateId>,
    pub rejected: Vec<CandidateId>,
    /// Fewer applicants than `k`: everybody is accepted.
    pub under_subscribed: bool,
}

/// Accepts the `k` highest scores. Ties rank the lower id first, so the
/// outcome is a deterministic function of the pool.
pub fn select_threshold(scores: &[(CandidateId, f64)], k: usize) -> ThresholdOutcome {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.len() <= k {
        let threshold = ranked.last().map_or(0.0, |r| r.1);
        if ranked.len() < k {
            log::debug!("under-subscribed pool: {} applicants for {} slots", ranked.len(), k);
        }
        return ThresholdOutcome {
            threshold,
            accepted: ranked.iter().map(|r| r.0).collect(),
            rejected: Vec::new(),
            under_subscribed: ranked.len() < k,
        };
    }
    ThresholdOutcome {
        threshold: ranked[k - 1].1,
        accepted: ranked[..k].iter().map(|r| r.0).collect(),
        rejected: ranked[k..].iter().map(|r| r.0).collect(),
        under_subscribed: false,
    }
}

/// One candidate of the observable history window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub id: CandidateId,
    /// Features at the rejected application.
    pub features: Vec<f64>,
    pub score: f64,
    pub last_application: u64,
    pub num_applications: u32,
    pub recommendation: Option<Recommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicantView {
    pub id: CandidateId,
    pub features: Vec<f64>,
    pub score: f64,
    /// Step of the previous application, `None` for first-time applicants.
    pub previous_application: Option<u64>,
    pub num_applications: u32,
    pub last_goal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u64,
    pub horizon: u64,
    pub threshold: f64,
    pub applicants: Vec<ApplicantView>,
    pub rejected: Vec<CandidateId>,
    pub history: Vec<HistoryEntry>,
}

/// Full latent state at time `t`, after the pool has been thresholded.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub t: u64,
    pub candidates: BTreeMap<CandidateId, Candidate>,
    pub applicants: Vec<CandidateId>,
    pub scores: BTreeMap<CandidateId, f64>,
    pub threshold: f64,
    pub accepted: Vec<CandidateId>,
    pub rejected: Vec<CandidateId>,
    pub under_subscribed: bool,
    /// Reapplicants at `t` with every recommended change in place.
    pub succ: BTreeSet<CandidateId>,
    /// Candidates whose last application was rejected within `[t-T, t-1]`.
    pub window: Vec<HistoryEntry>,
    pub rr: Option<f64>,
    pub rf: Option<f64>,
}

impl EnvState {
    pub fn window_ids(&self) -> BTreeSet<CandidateId> {
        self.window.iter().map(|h| h.id).collect()
    }

    pub fn accepted_set(&self) -> BTreeSet<CandidateId> {
        self.accepted.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Entered,
    Applied,
    Accepted,
    Rejected,
    Recommended,
    Clamped,
    DroppedOut,
    Implemented,
    Reapplied,
    UnderSubscribed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub kind: EventKind,
    pub candidate: Option<CandidateId>,
    pub payload: serde_json::Value,
}

/// Everything that happened on one transition `t -> t+1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    /// Time reached by the transition.
    pub step: u64,
    pub accepted: Vec<CandidateId>,
    pub dropouts: Vec<CandidateId>,
    /// `(candidate, feature index)` pairs that succeeded this transition.
    pub implementations: Vec<(CandidateId, usize)>,
    pub reapplied: Vec<CandidateId>,
    pub entrants: Vec<CandidateId>,
    pub clamped: Vec<CandidateId>,
    /// Goal scores `M(x_cf)` of the recommendations issued at the previous step.
    pub goal_scores: Vec<f64>,
    pub gini: Option<f64>,
    /// Metrics of the new pool.
    pub rr: Option<f64>,
    pub rf: Option<f64>,
    pub threshold: f64,
    pub n_rejected: usize,
}

/// Recommendations for every candidate rejected at the current step.
pub type Action = BTreeMap<CandidateId, (Vec<f64>, f64)>;

pub struct Environment {
    config: EnvConfig,
    model: Arc<ScoreModel>,
    marginals: Arc<FeatureMarginals>,
    rng: ChaCha8Rng,
    state: EnvState,
    next_id: CandidateId,
    events: Vec<Event>,
}

impl Environment {
    pub fn reset(config: EnvConfig, model: Arc<ScoreModel>, marginals: Arc<FeatureMarginals>) -> Result<(Self, Observation)> {
        config.validate()?;
        let z = model.num_features();
        if marginals.num_features() != z || config.behavior.difficulties.len() != z {
            return Err(Error::Config(format!(
                "feature width mismatch: model {z}, marginals {}, difficulties {}",
                marginals.num_features(),
                config.behavior.difficulties.len()
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let state = EnvState {
            t: 0,
            candidates: BTreeMap::new(),
            applicants: Vec::new(),
            scores: BTreeMap::new(),
            threshold: 0.0,
            accepted: Vec::new(),
            rejected: Vec::new(),
            under_subscribed: false,
            succ: BTreeSet::new(),
            window: Vec::new(),
            rr: None,
            rf: None,
        };
        let mut env = Environment { config, model, marginals, rng, state, next_id: 0, events: Vec::new() };
        let mut pool = Vec::with_capacity(env.config.initial_population);
        for _ in 0..env.config.initial_population {
            pool.push(env.spawn(0));
        }
        env.form_pool(pool, Vec::new(), BTreeSet::new());
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn model(&self) -> &ScoreModel {
        &self.model
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.config.episode_length
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, self.config.horizon)
    }

    /// Writes the event log as JSON lines.
    pub fn write_events<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn log(&mut self, kind: EventKind, candidate: Option<CandidateId>, payload: serde_json::Value) {
        if self.config.record_events {
            self.events.push(Event { step: self.state.t, kind, candidate, payload });
        }
    }

    fn spawn(&mut self, t: u64) -> CandidateId {
        let features = self.marginals.sample(&mut self.rng);
        let id = self.next_id;
        self.next_id += 1;
        let z = features.len();
        self.state.candidates.insert(
            id,
            Candidate {
                id,
                applied_features: features.clone(),
                features,
                last_application: t,
                num_applications: 0,
                rejected_at: None,
                recommendation: None,
                last_recommendation: None,
                implemented: vec![false; z],
                status: Status::Applying,
            },
        );
        self.log(EventKind::Entered, Some(id), serde_json::Value::Null);
        id
    }

    /// Registers `entrants` and `reapplicants` as the pool of the current
    /// step, scores and thresholds it and computes the step's metrics.
    fn form_pool(&mut self, entrants: Vec<CandidateId>, reapplicants: Vec<CandidateId>, window: BTreeSet<CandidateId>) {
        let t = self.state.t;
        let mut history = Vec::with_capacity(window.len());
        for id in &window {
            let c = &self.state.candidates[id];
            history.push(HistoryEntry {
                id: *id,
                features: c.applied_features.clone(),
                score: self.model.score_of(&c.applied_features),
                last_application: c.last_application,
                num_applications: c.num_applications,
                recommendation: c.recommendation.clone().or_else(|| c.last_recommendation.clone()),
            });
        }

        let mut succ = BTreeSet::new();
        let mut pool: Vec<CandidateId> = entrants.iter().chain(&reapplicants).copied().collect();
        pool.sort_unstable();
        for &id in &reapplicants {
            let c = self.state.candidates.get_mut(&id).expect("live reapplicant");
            if c.fully_implemented() && t - c.last_application <= self.config.horizon {
                succ.insert(id);
            }
            c.last_recommendation = c.recommendation.take();
        }
        let mut scores = BTreeMap::new();
        for &id in &pool {
            let c = self.state.candidates.get_mut(&id).expect("live applicant");
            c.status = Status::Applying;
            c.last_application = t;
            c.num_applications += 1;
            c.applied_features.clone_from(&c.features);
            scores.insert(id, self.model.score_of(&c.features));
        }
        for &id in &pool {
            self.log(EventKind::Applied, Some(id), serde_json::json!({ "score": scores[&id] }));
        }

        let ranked: Vec<(CandidateId, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
        let outcome = select_threshold(&ranked, self.config.acceptances);
        if outcome.under_subscribed {
            log::warn!("step {t}: {} applicants for {} slots", pool.len(), self.config.acceptances);
            self.log(EventKind::UnderSubscribed, None, serde_json::json!({ "applicants": pool.len() }));
        }
        for &id in &outcome.accepted {
            self.log(EventKind::Accepted, Some(id), serde_json::Value::Null);
        }
        for &id in &outcome.rejected {
            self.state.candidates.get_mut(&id).expect("live").rejected_at = Some(t);
            self.log(EventKind::Rejected, Some(id), serde_json::Value::Null);
        }

        let accepted: BTreeSet<CandidateId> = outcome.accepted.iter().copied().collect();
        self.state.rr = metrics::recourse_reliability(&succ, &accepted);
        self.state.rf = metrics::recourse_feasibility(&succ, &window);
        self.state.applicants = pool;
        self.state.scores = scores;
        self.state.threshold = outcome.threshold;
        self.state.accepted = outcome.accepted;
        self.state.rejected = outcome.rejected;
        self.state.under_subscribed = outcome.under_subscribed;
        self.state.succ = succ;
        self.state.window = history;
    }

    /// Advances one step given recommendations for every rejected candidate.
    pub fn step(&mut self, action: &Action) -> Result<(Observation, StepEvents)> {
        let t = self.state.t;
        let rejected: BTreeSet<CandidateId> = self.state.rejected.iter().copied().collect();
        if let Some(missing) = rejected.iter().find(|id| !action.contains_key(id)) {
            return Err(Error::Contract(format!("no recommendation for rejected candidate {missing} at step {t}")));
        }
        if let Some(extra) = action.keys().find(|id| !rejected.contains(id)) {
            return Err(Error::Contract(format!("recommendation for candidate {extra} who was not rejected at step {t}")));
        }
        let z = self.model.num_features();
        let mut ev = StepEvents { step: t + 1, ..StepEvents::default() };

        // Phase 1: accepted candidates leave for good.
        for id in self.state.accepted.clone() {
            self.state.candidates.get_mut(&id).expect("live").status = Status::Accepted;
            ev.accepted.push(id);
        }

        // Phase 2: rejected candidates react to their recommendation.
        for (&id, (cf, goal)) in action {
            if cf.len() != z {
                return Err(Error::Shape { expected: z, got: cf.len() });
            }
            if !goal.is_finite() || cf.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite recommendation for candidate {id}")));
            }
            let clamped: Vec<f64> = cf.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            if clamped != *cf {
                ev.clamped.push(id);
                self.log(EventKind::Clamped, Some(id), serde_json::Value::Null);
            }
            ev.goal_scores.push(self.model.score_of(&clamped));
            let goal = goal.clamp(0.0, 1.0);

            let c = self.state.candidates.get_mut(&id).expect("live");
            let score = self.model.score_of(&c.features);
            let gap = GapState::new(goal, score, c.num_applications.saturating_sub(1), c.last_application, t, self.config.horizon);
            for i in 0..z {
                let same = (clamped[i] - c.features[i]).abs() <= CHANGE_EPS;
                c.implemented[i] = same;
                if same {
                    c.features[i] = clamped[i];
                }
            }
            c.recommendation = Some(Recommendation { counterfactual: clamped, goal, issued_at: t });
            c.status = Status::Waiting;
            let p_drop = self
                .config
                .overrides
                .dropout_probability
                .unwrap_or_else(|| behavior::dropout_probability(&gap, &self.config.behavior));
            let dropped = self.rng.random::<f64>() < p_drop;
            if dropped {
                c.status = Status::Dropped;
                c.recommendation = None;
                ev.dropouts.push(id);
            }
            let payload = serde_json::json!({ "goal": goal });
            self.log(EventKind::Recommended, Some(id), payload);
            if dropped {
                self.log(EventKind::DroppedOut, Some(id), serde_json::Value::Null);
            }
        }
        ev.n_rejected = action.len();
        ev.gini = metrics::gini_index(&ev.goal_scores).ok();

        // Waiting candidates make one attempt per unimplemented feature.
        let beta = self.config.behavior.beta;
        let waiting: Vec<CandidateId> = self
            .state
            .candidates
            .values()
            .filter(|c| c.status == Status::Waiting)
            .map(|c| c.id)
            .collect();
        for &id in &waiting {
            let c = self.state.candidates.get_mut(&id).expect("live");
            let rec = c.recommendation.as_ref().expect("waiting implies a recommendation");
            for i in 0..z {
                if c.implemented[i] {
                    continue;
                }
                let p = self.config.overrides.success_probability.unwrap_or_else(|| {
                    behavior::feature_success_probability(c.features[i], rec.counterfactual[i], self.config.behavior.difficulties[i], beta)
                });
                if self.rng.random::<f64>() < p {
                    c.features[i] = rec.counterfactual[i];
                    c.implemented[i] = true;
                    ev.implementations.push((id, i));
                }
            }
        }
        if self.config.record_events {
            for &(id, i) in &ev.implementations {
                self.events.push(Event { step: t, kind: EventKind::Implemented, candidate: Some(id), payload: serde_json::json!({ "feature": i }) });
            }
        }

        // Phase 3: new round of applications.
        self.state.t = t + 1;
        let now = t + 1;
        let horizon = self.config.horizon;
        let window: BTreeSet<CandidateId> = self
            .state
            .candidates
            .values()
            .filter(|c| matches!(c.rejected_at, Some(s) if s == c.last_application && s + horizon >= now && s < now))
            .map(|c| c.id)
            .collect();

        let mut entrants = Vec::with_capacity(self.config.entrants);
        for _ in 0..self.config.entrants {
            entrants.push(self.spawn(now));
        }
        for &id in &waiting {
            let c = &self.state.candidates[&id];
            let rec = c.recommendation.as_ref().expect("waiting");
            let score = self.model.score_of(&c.features);
            let gap = GapState::new(rec.goal, score, c.num_applications.saturating_sub(1), c.last_application, now, horizon);
            let forced = now - c.last_application >= horizon;
            let p = if forced {
                1.0
            } else {
                self.config
                    .overrides
                    .reapply_probability
                    .unwrap_or_else(|| behavior::reapply_probability(&gap, &self.config.behavior))
            };
            if forced || self.rng.random::<f64>() < p {
                ev.reapplied.push(id);
            }
        }
        for &id in &ev.reapplied {
            self.log(EventKind::Reapplied, Some(id), serde_json::Value::Null);
        }
        ev.entrants.clone_from(&entrants);
        self.form_pool(entrants, ev.reapplied.clone(), window);

        ev.rr = self.state.rr;
        ev.rf = self.state.rf;
        ev.threshold = self.state.threshold;
        Ok((self.observe(), ev))
    }
}

/// The agent-visible slice of the state: current applicants, who was
/// rejected, and the metadata window over `[t-T, t-1]`. Latent features of
/// waiting or departed candidates are not exposed.
pub fn observe(state: &EnvState, horizon: u64) -> Observation {
    let applicants = state
        .applicants
        .iter()
        .map(|id| {
            let c = &state.candidates[id];
            let previous_application = state.window.iter().find(|h| h.id == *id).map(|h| h.last_application);
            ApplicantView {
                id: *id,
                features: c.applied_features.clone(),
                score: state.scores[id],
                previous_application,
                num_applications: c.num_applications,
                last_goal: c.last_recommendation.as_ref().map(|r| r.goal),
            }
        })
        .collect();
    Observation {
        t: state.t,
        horizon,
        threshold: state.threshold,
        applicants,
        rejected: state.rejected.clone(),
        history: state.window.clone(),
    }
}
