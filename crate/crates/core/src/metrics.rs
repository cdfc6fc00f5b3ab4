//! Equity, reliability and feasibility metrics plus both reward functions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Candidate identifiers are plain integers issued by the environment.
pub type CandidateId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Weight on reliability in the predictor reward.
    pub alpha: f64,
    /// Weight on feasibility in the predictor reward.
    pub tau: f64,
    /// Coefficient in front of the logarithms.
    pub log_coeff: f64,
    /// Error tolerance of the recommender reward.
    pub epsilon: f64,
    /// Cost weight of the recommender reward.
    pub varphi: f64,
    /// Error weight of the recommender reward.
    pub psi: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { alpha: 7.0, tau: 5.0, log_coeff: 0.90, epsilon: 0.01, varphi: 10.0, psi: 300.0 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.tau > 0.0) {
            return Err(Error::Config("alpha and tau must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.varphi >= 0.0) {
            return Err(Error::Config("epsilon and varphi must be non-negative".into()));
        }
        if !(self.psi >= 10.0 * self.varphi) {
            return Err(Error::Config(format!("psi ({}) must dominate varphi ({})", self.psi, self.varphi)));
        }
        Ok(())
    }
}

/// Per-step evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub gini: Option<f64>,
    pub rr: Option<f64>,
    pub rf: Option<f64>,
    pub n_rejected: usize,
    pub threshold: f64,
    pub reward_recommender: f64,
    pub reward_predictor: f64,
}

/// Mean absolute pairwise difference over all ordered pairs, normalized by
/// `2 n Σ g`. Runs in `O(n log n)` via the sorted-rank identity.
pub fn gini_index(goal_scores: &[f64]) -> Result<f64> {
    if goal_scores.is_empty() {
        return Err(Error::UndefinedMetric("gini of an empty set"));
    }
    let total: f64 = goal_scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric("gini with non-positive total"));
    }
    let mut sorted = goal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let low = sorted[0];
    // Σ_{i,j} |g_i - g_j| = 2 Σ_k (2k - n + 1) g_(k) for 0-based ranks k; the
    // rank weights sum to zero, so shifting by the minimum keeps ties exact
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, &g)| (2.0 * k as f64 - n as f64 + 1.0) * (g - low))
        .sum::<f64>()
        * 2.0;
    Ok((pair_sum / (2.0 * n as f64 * total)).max(0.0))
}

/// Share of successful reapplicants who were accepted; `None` when nobody
/// reapplied with a fully implemented recommendation.
pub fn recourse_reliability(succ: &BTreeSet<CandidateId>, accepted: &BTreeSet<CandidateId>) -> Option<f64> {
    if succ.is_empty() {
        return None;
    }
    Some(succ.intersection(accepted).count() as f64 / succ.len() as f64)
}

/// Share of recently rejected candidates who came back with a fully
/// implemented recommendation. Dropouts stay in the denominator.
pub fn recourse_feasibility(succ: &BTreeSet<CandidateId>, window_rejected: &BTreeSet<CandidateId>) -> Option<f64> {
    if window_rejected.is_empty() {
        return None;
    }
    Some(succ.len() as f64 / window_rejected.len() as f64)
}

/// Floor applied to a metric before taking its logarithm.
pub const LOG_FLOOR: f64 = 1e-6;

/// `α(1 + c ln RR) + τ(1 + c ln RF)`; an absent metric contributes zero.
pub fn predictor_reward(rr: Option<f64>, rf: Option<f64>, params: &RewardParams) -> f64 {
    let term = |weight: f64, metric: Option<f64>| match metric {
        Some(v) => weight * (1.0 + params.log_coeff * v.max(LOG_FLOOR).ln()),
        None => 0.0,
    };
    term(params.alpha, rr) + term(params.tau, rf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardPhase {
    /// Error-only shaping while difficulty estimates settle.
    Warmup,
    Full,
}

pub fn recommender_reward(error: f64, est_cost: f64, params: &RewardParams, phase: RewardPhase) -> f64 {
    match phase {
        RewardPhase::Warmup => -params.psi * error,
        RewardPhase::Full => {
            let cost_term = -params.varphi * est_cost;
            if error <= params.epsilon {
                cost_term
            } else {
                cost_term - params.psi * (error - params.epsilon)
            }
        }
    }
}

/// Modification cost under the true difficulties.
pub fn true_cost(x_f: &[f64], x_cf: &[f64], difficulties: &[f64]) -> Result<f64> {
    check_len(x_f.len(), x_cf.len())?;
    check_len(x_f.len(), difficulties.len())?;
    Ok(weighted_l1(x_f, x_cf, difficulties))
}

#[inline]
pub(crate) fn weighted_l1(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), d)| (y - x).abs() * d).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_gini(g: &[f64]) -> f64 {
        let n = g.len() as f64;
        let mut s = 0.0;
        for a in g {
            for b in g {
                s += (a - b).abs();
            }
        }
        s / (2.0 * n * g.iter().sum::<f64>())
    }

    fn ids(v: &[u64]) -> BTreeSet<u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_index(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!((gini_index(&[0.4, 0.6]).unwrap() - 0.1).abs() < 1e-15);
        assert!(gini_index(&[]).is_err());
        assert!(gini_index(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn reliability_and_feasibility_counts() {
        assert_eq!(recourse_reliability(&ids(&[1, 2]), &ids(&[1, 2, 3])), Some(1.0));
        let rr = recourse_reliability(&ids(&[1, 2, 3]), &ids(&[1, 2, 9])).unwrap();
        assert!((rr - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recourse_reliability(&ids(&[]), &ids(&[1])), None);

        let window: BTreeSet<u64> = (0..10).collect();
        assert_eq!(recourse_feasibility(&ids(&[0, 1, 2, 3]), &window), Some(0.4));
        assert_eq!(recourse_feasibility(&window, &window), Some(1.0));
        assert_eq!(recourse_feasibility(&ids(&[]), &ids(&[])), None);
    }

    #[test]
    fn predictor_reward_examples() {
        let p = RewardParams { alpha: 7.0, tau: 5.0, ..RewardParams::default() };
        assert_eq!(predictor_reward(Some(1.0), Some(1.0), &p), 12.0);
        let e = (-1.0f64).exp();
        assert!((predictor_reward(Some(e), Some(e), &p) - 1.2).abs() < 1e-12);
        assert_eq!(predictor_reward(None, Some(1.0), &p), 5.0);
        let floored = predictor_reward(Some(0.0), None, &p);
        assert!((floored - 7.0 * (1.0 + 0.9 * LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn recommender_reward_examples() {
        let p = RewardParams::default();
        assert_eq!(recommender_reward(0.01, 0.2, &p, RewardPhase::Full), -2.0);
        assert!((recommender_reward(0.02, 0.1, &p, RewardPhase::Full) + 4.0).abs() < 1e-12);
        assert_eq!(recommender_reward(0.02, 5.0, &p, RewardPhase::Warmup), -6.0);
        assert_eq!((p.epsilon, p.varphi, p.psi), (0.01, 10.0, 300.0));
        p.validate().unwrap();
        assert!(RewardParams { psi: 50.0, ..p }.validate().is_err());
    }

    #[test]
    fn true_cost_examples() {
        let d = crate::behavior::DEFAULT_DIFFICULTIES;
        let x = [0.3; 10];
        assert_eq!(true_cost(&x, &x, &d).unwrap(), 0.0);
        let mut cf = x;
        cf[0] += 0.5;
        cf[1] -= 0.2;
        assert!((true_cost(&x, &cf, &d).unwrap() - 0.45).abs() < 1e-12);
        assert!(true_cost(&x[..3], &cf, &d).is_err());
    }

    proptest! {
        #[test]
        fn gini_matches_pairwise(g in proptest::collection::vec(0.01..1.0f64, 1..40), c in 0.1..10.0f64) {
            let fast = gini_index(&g).unwrap();
            prop_assert!((fast - brute_gini(&g)).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&fast));
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            prop_assert!((gini_index(&scaled).unwrap() - fast).abs() < 1e-12);
            let mut rev = g.clone();
            rev.reverse();
            prop_assert!((gini_index(&rev).unwrap() - fast).abs() < 1e-12);
        }

        #[test]
        fn predictor_reward_increasing(rr in 0.01..0.99f64, rf in 0.01..0.99f64, d in 0.001..0.01f64) {
            let p = RewardParams::default();
            let base = predictor_reward(Some(rr), Some(rf), &p);
            prop_assert!(predictor_reward(Some(rr + d), Some(rf), &p) > base);
            prop_assert!(predictor_reward(Some(rr), Some(rf + d), &p) > base);
        }

        #[test]
        fn recommender_reward_non_increasing(e in 0.0..0.5f64, c in 0.0..2.0f64, d in 0.0..0.1f64) {
            let p = RewardParams::default();
            let base = recommender_reward(e, c, &p, RewardPhase::Full);
            prop_assert!(recommender_reward(e + d, c, &p, RewardPhase::Full) <= base);
            prop_assert!(recommender_reward(e, c + d, &p, RewardPhase::Full) <= base);
        }
    }
}
