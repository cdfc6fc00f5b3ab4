//! Classical counterfactual generators usable in place of the learned
//! recommender.
//!
//! * [`ustun_exact`]: minimal L1 change on a linear logit, solved greedily.
//! * [`wachter_gradient`]: proximal gradient search with an escalating
//!   penalty on the score gap.
//! * [`dice_diverse`]: restarts of the gradient search with a repulsion term.
//!   This is a simplified stand-in and is labelled `diverse-CF (simplified)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scorer::{logit, sigmoid, ScoreModel};

#[derive(Debug, Clone, Copy)]
pub struct CfRequest<'a> {
    pub x_f: &'a [f64],
    pub goal: f64,
    pub model: &'a ScoreModel,
    pub tolerance: f64,
}

impl<'a> CfRequest<'a> {
    pub fn new(model: &'a ScoreModel, x_f: &'a [f64], goal: f64) -> Self {
        CfRequest { x_f, goal, model, tolerance: 1e-3 }
    }

    fn validate(&self) -> Result<()> {
        check_len(self.model.num_features(), self.x_f.len())?;
        if !(self.goal > 0.0 && self.goal < 1.0) {
            return Err(Error::Contract(format!("goal {} outside (0, 1)", self.goal)));
        }
        if self.x_f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("features outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Ours,
    Ustun,
    Wachter,
    Dice,
}

impl Generator {
    pub fn label(self) -> &'static str {
        match self {
            Generator::Ours => "ours",
            Generator::Ustun => "ustun",
            Generator::Wachter => "wachter",
            Generator::Dice => "diverse-CF (simplified)",
        }
    }
}

/// Greedy minimal-L1 counterfactual: spend the required logit gain on the
/// features with the largest `|w|` first, each up to its box bound.
pub fn ustun_exact(req: &CfRequest) -> Result<Vec<f64>> {
    req.validate()?;
    let w = &req.model.weights;
    let mut needed = logit(req.goal) - req.model.logit_of(req.x_f);
    let mut x = req.x_f.to_vec();
    if needed <= 0.0 {
        return Ok(x);
    }
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    for i in order {
        let room = if w[i] > 0.0 { 1.0 - x[i] } else { x[i] };
        let gain = w[i].abs() * room;
        if gain >= needed {
            let delta = needed / w[i].abs();
            x[i] = if w[i] > 0.0 { (x[i] + delta).min(1.0) } else { (x[i] - delta).max(0.0) };
            return Ok(x);
        }
        x[i] = if w[i] > 0.0 { 1.0 } else { 0.0 };
        needed -= gain;
    }
    Err(Error::Infeasible { goal: req.goal, max_score: req.model.score_of(&x) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WachterConfig {
    pub lambda_start: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    pub inner_iterations: usize,
}

impl Default for WachterConfig {
    fn default() -> Self {
        WachterConfig { lambda_start: 1.0, lambda_factor: 10.0, lambda_max: 1e6, inner_iterations: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub counterfactual: Vec<f64>,
    pub error: f64,
    pub converged: bool,
}

struct Repulsion<'a> {
    members: &'a [Vec<f64>],
    weight: f64,
    floor: f64,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Proximal gradient on `λ (M(x) - g)^2 + |x - x_f|_1` over the unit box,
/// starting from `start`.
fn descend(req: &CfRequest, start: &[f64], lambda: f64, iterations: usize, repel: Option<&Repulsion>) -> Vec<f64> {
    let w = &req.model.weights;
    let w_sq: f64 = w.iter().map(|v| v * v).sum();
    // curvature bound: |σ'| <= 1/4 and |σ''| < 0.0963
    let step = 1.0 / (2.0 * lambda * w_sq * (0.0625 + 0.0963)).max(1e-12);
    let mut x = start.to_vec();
    for _ in 0..iterations {
        let m = req.model.score_of(&x);
        let coeff = 2.0 * lambda * (m - req.goal) * m * (1.0 - m);
        for i in 0..x.len() {
            let mut g = coeff * w[i];
            if let Some(r) = repel {
                for c in r.members {
                    if l1(&x, c) < r.floor {
                        g -= r.weight * (x[i] - c[i]).signum();
                    }
                }
            }
            let v = x[i] - step * g - req.x_f[i];
            let shrunk = v.signum() * (v.abs() - step).max(0.0);
            x[i] = (req.x_f[i] + shrunk).clamp(0.0, 1.0);
        }
    }
    x
}

fn escalate(req: &CfRequest, start: &[f64], config: &WachterConfig, repel: Option<&Repulsion>) -> SearchResult {
    let err = |x: &[f64]| (req.model.score_of(x) - req.goal).abs();
    let mut best = SearchResult { counterfactual: start.to_vec(), error: err(start), converged: err(start) <= req.tolerance };
    if best.converged {
        return best;
    }
    let mut lambda = config.lambda_start;
    let mut x = start.to_vec();
    while lambda <= config.lambda_max {
        x = descend(req, &x, lambda, config.inner_iterations, repel);
        let e = err(&x);
        if e < best.error {
            best = SearchResult { counterfactual: x.clone(), error: e, converged: e <= req.tolerance };
        }
        if best.converged {
            break;
        }
        lambda *= config.lambda_factor;
    }
    best
}

/// Gradient counterfactual search. A result outside tolerance is returned
/// with `converged = false` and logged.
pub fn wachter_gradient(req: &CfRequest, config: &WachterConfig) -> Result<SearchResult> {
    req.validate()?;
    let res = escalate(req, req.x_f, config, None);
    if !res.converged {
        log::warn!("wachter search stopped at error {:.3e} (tolerance {:.1e})", res.error, req.tolerance);
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceConfig {
    pub restarts: usize,
    pub repulsion: f64,
    pub diversity_floor: f64,
    /// Half-width of the uniform jitter applied to restart starting points.
    pub jitter: f64,
    pub seed: u64,
    pub wachter: WachterConfig,
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig { restarts: 4, repulsion: 0.1, diversity_floor: 0.05, jitter: 0.1, seed: 0, wachter: WachterConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiverseResult {
    pub best: SearchResult,
    /// Kept restarts, pairwise at least `diversity_floor` apart in L1.
    pub members: Vec<Vec<f64>>,
}

pub fn dice_diverse(req: &CfRequest, config: &DiceConfig) -> Result<DiverseResult> {
    req.validate()?;
    if config.restarts == 0 {
        return Err(Error::Config("restarts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut members: Vec<Vec<f64>> = Vec::new();
    let mut results: Vec<SearchResult> = Vec::new();
    for r in 0..config.restarts {
        let start: Vec<f64> = if r == 0 {
            req.x_f.to_vec()
        } else {
            req.x_f.iter().map(|&v| (v + rng.random_range(-config.jitter..=config.jitter)).clamp(0.0, 1.0)).collect()
        };
        let repel = Repulsion { members: &members, weight: config.repulsion, floor: config.diversity_floor };
        let res = escalate(req, &start, &config.wachter, Some(&repel));
        if members.iter().all(|m| l1(m, &res.counterfactual) >= config.diversity_floor) {
            members.push(res.counterfactual.clone());
            results.push(res);
        }
    }
    let pick = results
        .iter()
        .filter(|r| r.converged)
        .min_by(|a, b| l1(&a.counterfactual, req.x_f).total_cmp(&l1(&b.counterfactual, req.x_f)))
        .or_else(|| results.iter().min_by(|a, b| a.error.total_cmp(&b.error)))
        .cloned()
        .expect("first restart is always kept");
    if !pick.converged {
        log::warn!("diverse-CF search: no restart within tolerance, best error {:.3e}", pick.error);
    }
    Ok(DiverseResult { best: pick, members })
}

/// Score reached by a counterfactual and its gap to the goal.
pub fn achieved_error(model: &ScoreModel, x_cf: &[f64], goal: f64) -> f64 {
    (sigmoid(model.logit_of(x_cf)) - goal).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    fn model(w: &[f64], b: f64) -> ScoreModel {
        ScoreModel::new(w.to_vec(), b)
    }

    #[test]
    fn ustun_identity_when_already_above() {
        let m = model(&[1.0, -1.0], 0.0);
        let x = [0.9, 0.1];
        let req = CfRequest::new(&m, &x, 0.5);
        assert_eq!(ustun_exact(&req).unwrap(), x.to_vec());
    }

    #[test]
    fn ustun_two_feature_hand_case() {
        let m = model(&[2.0, 1.0], 0.0);
        let x = [0.5, 0.5];
        let goal = sigmoid(m.logit_of(&x) + 0.5);
        let cf = ustun_exact(&CfRequest::new(&m, &x, goal)).unwrap();
        assert!((cf[0] - 0.75).abs() < 1e-12);
        assert_eq!(cf[1], 0.5);
        assert!(achieved_error(&m, &cf, goal) <= 1e-12);
    }

    #[test]
    fn ustun_infeasible_reports_max() {
        let m = model(&[1.0, -1.0], -3.0);
        let x = [0.2, 0.8];
        match ustun_exact(&CfRequest::new(&m, &x, 0.9)) {
            Err(Error::Infeasible { max_score, .. }) => assert!((max_score - sigmoid(-2.0)).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    /// Exhaustive grid search for the minimal L1 change reaching `goal`.
    fn grid_min(m: &ScoreModel, x: &[f64], goal: f64, h: f64) -> Option<f64> {
        let z = x.len();
        let steps = (1.0 / h).round() as usize;
        let mut best: Option<f64> = None;
        let mut idx = vec![0usize; z];
        loop {
            let p: Vec<f64> = idx.iter().map(|&k| k as f64 * h).collect();
            if m.score_of(&p) >= goal {
                let c = l1(&p, x);
                best = Some(best.map_or(c, |b: f64| b.min(c)));
            }
            let mut d = 0;
            while d < z {
                idx[d] += 1;
                if idx[d] <= steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == z {
                return best;
            }
        }
    }

    #[test]
    fn ustun_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 0.05;
        let mut checked = 0;
        while checked < 40 {
            let z = rng.random_range(1..=3);
            let w: Vec<f64> = (0..z).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = model(&w, rng.random_range(-1.0..1.0));
            let x: Vec<f64> = (0..z).map(|_| (rng.random_range(0..=20) as f64) * h).collect();
            let goal = rng.random_range(0.05..0.95);
            let req = CfRequest::new(&m, &x, goal);
            let Ok(cf) = ustun_exact(&req) else { continue };
            let Some(grid) = grid_min(&m, &x, goal, h) else { continue };
            let cost = l1(&cf, &x);
            assert!(cost <= grid + 1e-9, "greedy {cost} worse than grid {grid}");
            assert!(grid <= cost + z as f64 * h + 1e-9);
            assert!(m.score_of(&cf) >= goal - 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn wachter_immediate_return_at_goal() {
        let m = model(&[1.0, 2.0], -1.0);
        let x = [0.3, 0.4];
        let res = wachter_gradient(&CfRequest::new(&m, &x, m.score_of(&x)), &WachterConfig::default()).unwrap();
        assert_eq!(res.counterfactual, x.to_vec());
        assert!(res.converged);
    }

    /// Stationary point of the 1-d objective found by bisection on its
    /// derivative.
    fn bisection_oracle(w: f64, b: f64, x0: f64, goal: f64, lambda: f64) -> f64 {
        let dobj = |x: f64| {
            let m = sigmoid(w * x + b);
            2.0 * lambda * (m - goal) * m * (1.0 - m) * w + 1.0
        };
        let (mut lo, mut hi) = (x0, 1.0);
        if dobj(lo) >= 0.0 {
            return x0;
        }
        if dobj(hi) <= 0.0 {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dobj(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn one_feature_stage_matches_bisection() {
        for (w, b, x0, goal, lambda) in [(2.0, -1.0, 0.2, 0.6, 100.0), (4.0, -2.0, 0.1, 0.7, 1000.0), (1.5, 0.0, 0.3, 0.75, 50.0)] {
            let m = model(&[w], b);
            let x = [x0];
            let req = CfRequest::new(&m, &x, goal);
            let got = descend(&req, &x, lambda, 20_000, None)[0];
            let want = bisection_oracle(w, b, x0, goal, lambda);
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn wachter_reaches_tolerance() {
        let m = model(&[1.0, 3.0, -2.0], -0.5);
        let x = [0.2, 0.3, 0.6];
        let req = CfRequest::new(&m, &x, 0.8);
        let res = wachter_gradient(&req, &WachterConfig::default()).unwrap();
        assert!(res.converged, "{res:?}");
        assert!(res.counterfactual.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = wachter_gradient(&CfRequest::new(&m, &res.counterfactual, 0.8), &WachterConfig::default()).unwrap();
        assert_eq!(again.counterfactual, res.counterfactual);
    }

    #[test]
    fn dice_single_restart_is_wachter() {
        let m = model(&[1.0, 3.0, -2.0], -0.5);
        let x = [0.2, 0.3, 0.6];
        let req = CfRequest::new(&m, &x, 0.8);
        let w = wachter_gradient(&req, &WachterConfig::default()).unwrap();
        let d = dice_diverse(&req, &DiceConfig { restarts: 1, ..DiceConfig::default() }).unwrap();
        assert_eq!(d.best, w);
    }

    #[test]
    fn dice_members_respect_floor() {
        let m = model(&[1.0, 3.0, -2.0, 0.5], -0.5);
        let x = [0.2, 0.3, 0.6, 0.5];
        let cfg = DiceConfig { restarts: 6, seed: 3, ..DiceConfig::default() };
        let d = dice_diverse(&CfRequest::new(&m, &x, 0.8), &cfg).unwrap();
        for i in 0..d.members.len() {
            for j in 0..i {
                assert!(l1(&d.members[i], &d.members[j]) >= cfg.diversity_floor);
            }
        }
        assert!(d.best.converged);
    }

    proptest! {
        #[test]
        fn ustun_output_in_box_and_idempotent(
            w in proptest::collection::vec(-3.0..3.0f64, 1..5),
            seed in 0u64..1000,
            goal in 0.05..0.95f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = w.iter().map(|_| rng.random::<f64>()).collect();
            let m = model(&w, 0.0);
            let cf = ustun_exact(&CfRequest::new(&m, &x, goal));
            prop_assume!(cf.is_ok());
            let cf = cf.unwrap();
            prop_assert!(cf.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(m.score_of(&cf) >= goal - 1e-12);
            let again = ustun_exact(&CfRequest::new(&m, &cf, goal)).unwrap();
            prop_assert!(l1(&again, &cf) <= 1e-9);
        }
    }
}
