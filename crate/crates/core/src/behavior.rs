//! Closed-form candidate behavior: dropout, per-feature implementation
//! success, and reapplication.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Difficulties used throughout the experiments (one per feature).
pub const DEFAULT_DIFFICULTIES: [f64; 10] = [0.84, 0.15, 0.85, 0.78, 0.25, 0.18, 0.29, 0.83, 0.91, 0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorParams {
    /// Dropout decay on the goal-score gap.
    pub rho: f64,
    /// Dropout decay on the number of reapplications.
    pub chi: f64,
    /// Dropout decay on the gap × reapplications interaction.
    pub omega: f64,
    /// Decay of the reapplication base probability in the gap.
    pub nu: f64,
    /// Global success scale; higher is easier.
    pub beta: f64,
    pub difficulties: Vec<f64>,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            rho: 2.0,
            chi: 0.1,
            omega: 0.5,
            nu: 3.0,
            beta: 0.05,
            difficulties: DEFAULT_DIFFICULTIES.to_vec(),
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("chi", self.chi), ("omega", self.omega), ("nu", self.nu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if let Some(d) = self.difficulties.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::Config(format!("difficulty {d} outside [0, 1]")));
        }
        Ok(())
    }
}

/// A candidate's standing relative to its goal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapState {
    /// `max(0, g - M(x))`.
    pub gap: f64,
    /// Reapplications so far (applications minus one).
    pub reapplications: u32,
    pub last_application: u64,
    pub now: u64,
    pub horizon: u64,
}

impl GapState {
    pub fn new(goal: f64, score: f64, reapplications: u32, last_application: u64, now: u64, horizon: u64) -> Self {
        GapState { gap: (goal - score).max(0.0), reapplications, last_application, now, horizon }
    }

    /// Fraction of the validity horizon already elapsed, in [0, 1].
    pub fn urgency(&self) -> f64 {
        let elapsed = self.now.saturating_sub(self.last_application) as f64;
        (elapsed / self.horizon.max(1) as f64).min(1.0)
    }
}

pub fn dropout_probability(gap: &GapState, params: &BehaviorParams) -> f64 {
    let b = gap.gap;
    let q = f64::from(gap.reapplications);
    let discouragement = params.rho * b + params.chi * q + params.omega * b * q;
    -(-discouragement).exp_m1()
}

/// `1 / (|x_cf - x_f| * x_cf) - 1`, or `+inf` when the denominator vanishes.
pub fn attainability(x_f: f64, x_cf: f64) -> f64 {
    let denom = (x_cf - x_f).abs() * x_cf;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        1.0 / denom - 1.0
    }
}

pub fn success_probability(attainability: f64, difficulty: f64, beta: f64) -> f64 {
    if difficulty == 0.0 || attainability == f64::INFINITY {
        return 1.0;
    }
    -(-beta * attainability / difficulty).exp_m1()
}

/// Success probability of moving one feature from `x_f` to `x_cf`.
pub fn feature_success_probability(x_f: f64, x_cf: f64, difficulty: f64, beta: f64) -> f64 {
    success_probability(attainability(x_f, x_cf), difficulty, beta)
}

pub fn reapply_probability(gap: &GapState, params: &BehaviorParams) -> f64 {
    let u = gap.urgency();
    let base = (-params.nu * gap.gap).exp();
    (1.0 - u) * base + u
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(rho: f64, chi: f64, omega: f64, nu: f64) -> BehaviorParams {
        BehaviorParams { rho, chi, omega, nu, ..BehaviorParams::default() }
    }

    fn gap(b: f64, q: u32, elapsed: u64, horizon: u64) -> GapState {
        GapState { gap: b, reapplications: q, last_application: 10, now: 10 + elapsed, horizon }
    }

    #[test]
    fn dropout_examples() {
        let p = BehaviorParams::default();
        assert_eq!(dropout_probability(&gap(0.0, 0, 0, 1), &p), 0.0);
        let v = dropout_probability(&gap(1.0, 5, 0, 1), &params(1.0, 0.0, 0.0, 0.0));
        assert!((v - 0.6321205588285577).abs() < 1e-12);
    }

    #[test]
    fn attainability_examples() {
        assert_eq!(attainability(0.0, 1.0), 0.0);
        assert!((attainability(0.5, 0.8) - 3.1666666666666665).abs() < 1e-9);
        assert_eq!(attainability(0.4, 0.4), f64::INFINITY);
        assert_eq!(attainability(0.4, 0.0), f64::INFINITY);
    }

    #[test]
    fn success_examples() {
        assert_eq!(success_probability(0.0, 1.0, 0.05), 0.0);
        let a = attainability(0.5, 0.8);
        let p = success_probability(a, 0.5, 0.05);
        assert!((p - (1.0 - (-0.05 * a / 0.5_f64).exp())).abs() < 1e-15);
        assert!((p - 0.2714).abs() < 1e-4);
        assert_eq!(success_probability(f64::INFINITY, 0.5, 0.05), 1.0);
        assert_eq!(success_probability(3.0, 0.0, 0.05), 1.0);
    }

    #[test]
    fn reapply_examples() {
        let p = params(0.0, 0.0, 0.0, 1.0);
        assert_eq!(reapply_probability(&gap(0.7, 0, 3, 3), &p), 1.0);
        assert_eq!(reapply_probability(&gap(0.0, 0, 1, 4), &p), 1.0);
        let v = reapply_probability(&gap(0.5, 0, 1, 2), &p);
        assert!((v - 0.8032653298563167).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dropout_monotone(b in 0.0..1.0f64, db in 0.0..0.5f64, q in 0u32..20, dq in 0u32..5) {
            let p = BehaviorParams::default();
            let base = dropout_probability(&gap(b, q, 0, 1), &p);
            prop_assert!((0.0..1.0).contains(&base));
            prop_assert!(dropout_probability(&gap((b + db).min(1.0), q, 0, 1), &p) >= base);
            prop_assert!(dropout_probability(&gap(b, q + dq, 0, 1), &p) >= base);
        }

        #[test]
        fn reapply_monotone(b in 0.0..1.0f64, db in 0.0..0.5f64, e in 0u64..5, horizon in 5u64..8) {
            let p = BehaviorParams::default();
            let base = reapply_probability(&gap(b, 0, e, horizon), &p);
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!(reapply_probability(&gap(b, 0, e + 1, horizon), &p) >= base);
            prop_assert!(reapply_probability(&gap((b + db).min(1.0), 0, e, horizon), &p) <= base);
        }

        #[test]
        fn success_composition(xf in 0.0..1.0f64, xcf in 0.0..1.0f64, d in 0.01..1.0f64, beta in 0.001..1.0f64) {
            let a = attainability(xf, xcf);
            prop_assume!(a.is_finite());
            prop_assert!(a >= 0.0);
            let direct = 1.0 - (-beta * (1.0 / ((xcf - xf).abs() * xcf) - 1.0) / d).exp();
            prop_assert!((feature_success_probability(xf, xcf, d, beta) - direct).abs() < 1e-12);
        }

        #[test]
        fn success_increasing_in_beta(a in 0.01..50.0f64, d in 0.05..1.0f64, beta in 0.001..0.5f64) {
            prop_assert!(success_probability(a, d, beta * 1.5) >= success_probability(a, d, beta));
        }
    }
}
