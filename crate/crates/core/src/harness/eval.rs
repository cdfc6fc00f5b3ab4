//! Evaluation episodes and the generator comparison table.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::EnvConfig;
use crate::error::{Error, Result};
use crate::metrics::{true_cost, RewardParams};
use crate::predictor::{episode_seed, run_episode, CounterfactualSource, GoalPolicy};
use crate::recommender::{sample_start, RecommenderConfig};
use crate::scorer::{FeatureMarginals, ScoreModel};

/// One row of the per-step CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStep {
    pub episode: usize,
    pub step: u64,
    pub gini: Option<f64>,
    pub rr: Option<f64>,
    pub rf: Option<f64>,
    pub n_rejected: usize,
    pub threshold: f64,
    pub reward: f64,
    pub cost_sum: f64,
    pub error_sum: f64,
    pub recommendations: usize,
}

/// Episode-level means: per-step averages for RR, RF and Gini over the
/// steps where they are defined, pooled per-recommendation averages for
/// cost and error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeMeans {
    pub rr: Option<f64>,
    pub rf: Option<f64>,
    pub gini: Option<f64>,
    pub true_cost: Option<f64>,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Episodes in which the metric was defined.
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub steps: Vec<EvalStep>,
    pub episodes: Vec<EpisodeMeans>,
    pub summary: Vec<SummaryRow>,
}

impl Evaluation {
    pub fn metric(&self, name: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.metric == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.metric(name).and_then(|r| r.mean)
    }

    pub fn std(&self, name: &str) -> Option<f64> {
        self.metric(name).and_then(|r| r.std)
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Population standard deviation.
fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    Some((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt())
}

pub fn episode_means(steps: &[EvalStep]) -> EpisodeMeans {
    let defined = |f: fn(&EvalStep) -> Option<f64>| steps.iter().filter_map(f).collect::<Vec<_>>();
    let n: usize = steps.iter().map(|s| s.recommendations).sum();
    let pooled = |f: fn(&EvalStep) -> f64| if n == 0 { None } else { Some(steps.iter().map(f).sum::<f64>() / n as f64) };
    EpisodeMeans {
        rr: mean(&defined(|s| s.rr)),
        rf: mean(&defined(|s| s.rf)),
        gini: mean(&defined(|s| s.gini)),
        true_cost: pooled(|s| s.cost_sum),
        error: pooled(|s| s.error_sum),
    }
}

pub const SUMMARY_METRICS: [&str; 5] = ["rr", "rf", "gini", "true_cost", "error"];

/// Groups per-step rows by episode (in order of first appearance) and
/// summarizes the episode means.
pub fn summarize(steps: &[EvalStep]) -> (Vec<EpisodeMeans>, Vec<SummaryRow>) {
    let mut groups: Vec<(usize, Vec<EvalStep>)> = Vec::new();
    for s in steps {
        match groups.last_mut() {
            Some((ep, rows)) if *ep == s.episode => rows.push(s.clone()),
            _ => groups.push((s.episode, vec![s.clone()])),
        }
    }
    let episodes: Vec<EpisodeMeans> = groups.iter().map(|(_, rows)| episode_means(rows)).collect();
    let pick = |e: &EpisodeMeans, name: &str| match name {
        "rr" => e.rr,
        "rf" => e.rf,
        "gini" => e.gini,
        "true_cost" => e.true_cost,
        _ => e.error,
    };
    let summary = SUMMARY_METRICS
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = episodes.iter().filter_map(|e| pick(e, name)).collect();
            SummaryRow { metric: name.to_string(), mean: mean(&vals), std: std_dev(&vals), episodes: vals.len() }
        })
        .collect();
    (episodes, summary)
}

/// Everything an evaluation run needs besides the episode count.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub env: EnvConfig,
    pub model: Arc<ScoreModel>,
    pub marginals: Arc<FeatureMarginals>,
    pub goals: GoalPolicy,
    pub source: CounterfactualSource,
    pub reward: RewardParams,
}

/// Runs `episodes` deterministic episodes; episode `i` uses the environment
/// seed derived from `(env.rng_seed, i)`.
pub fn run_evaluation(setup: &EvalSetup, episodes: usize) -> Result<Evaluation> {
    let mut steps = Vec::new();
    for ep in 0..episodes {
        let env = EnvConfig { rng_seed: episode_seed(setup.env.rng_seed, ep as u64), ..setup.env.clone() };
        let out = run_episode(&env, &setup.model, &setup.marginals, &setup.goals, &setup.source, &setup.reward)?;
        for (m, t) in out.steps.iter().zip(&out.totals) {
            steps.push(EvalStep {
                episode: ep,
                step: m.step,
                gini: m.gini,
                rr: m.rr,
                rf: m.rf,
                n_rejected: m.n_rejected,
                threshold: m.threshold,
                reward: m.reward_predictor,
                cost_sum: t.true_cost,
                error_sum: t.goal_error,
                recommendations: t.count,
            });
        }
    }
    let (episodes, summary) = summarize(&steps);
    Ok(Evaluation { steps, episodes, summary })
}

const STEP_HEADER: [&str; 11] =
    ["episode", "step", "gini", "rr", "rf", "n_rejected", "threshold", "reward", "cost_sum", "error_sum", "recommendations"];

pub fn write_steps<W: Write>(steps: &[EvalStep], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(STEP_HEADER)?;
    for s in steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_steps<R: Read>(input: R) -> Result<Vec<EvalStep>> {
    super::report::read_csv(input)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean error and true cost of one generator over a shared candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub generator: String,
    pub candidates: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub mean_true_cost: f64,
}

/// Candidates and goals drawn exactly as during recommender training.
pub fn comparison_candidates(
    model: &ScoreModel,
    marginals: &FeatureMarginals,
    config: &RecommenderConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_start(model, marginals, config, &mut rng)).collect()
}

pub fn compare_generators(
    model: &ScoreModel,
    candidates: &[(Vec<f64>, f64)],
    difficulties: &[f64],
    sources: &[CounterfactualSource],
) -> Result<Vec<ComparisonRow>> {
    if candidates.is_empty() {
        return Err(Error::Config("generator comparison needs at least one candidate".into()));
    }
    sources
        .iter()
        .map(|src| {
            let (mut err, mut max_err, mut cost) = (0.0, 0.0f64, 0.0);
            for (x, g) in candidates {
                let cf = src.generate(model, x, *g)?;
                let e = (model.score_of(&cf) - g).abs();
                err += e;
                max_err = max_err.max(e);
                cost += true_cost(x, &cf, difficulties)?;
            }
            let n = candidates.len() as f64;
            Ok(ComparisonRow {
                generator: src.kind().label().to_string(),
                candidates: candidates.len(),
                mean_error: err / n,
                max_error: max_err,
                mean_true_cost: cost / n,
            })
        })
        .collect()
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
