//! Tanh-squashed diagonal Gaussian policy over a box.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::{Gradients, Mlp, Trace};
use crate::error::{check_len, Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    low: Vec<f64>,
    high: Vec<f64>,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

/// Reparameterized samples plus what `backward` needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    trace: Trace,
    /// `tanh(u)` per entry.
    squashed: Array2<f64>,
    noise: Array2<f64>,
    stds: Array2<f64>,
    /// `tanh` of the raw log-std head, kept for its derivative.
    raw_tanh: Array2<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

impl GaussianPolicy {
    pub fn new(net: Mlp, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        let act_dim = low.len();
        check_len(act_dim, high.len())?;
        check_len(2 * act_dim, net.output_dim())?;
        if low.iter().zip(&high).any(|(l, h)| !(h > l)) {
            return Err(Error::Config("policy box must have high > low in every dimension".into()));
        }
        Ok(GaussianPolicy { net, low, high, log_std_min: -5.0, log_std_max: 2.0 })
    }

    pub fn act_dim(&self) -> usize {
        self.low.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    fn half_range(&self, j: usize) -> f64 {
        0.5 * (self.high[j] - self.low[j])
    }

    fn squash(&self, j: usize, y: f64) -> f64 {
        (self.low[j] + (y + 1.0) * self.half_range(j)).clamp(self.low[j], self.high[j])
    }

    fn log_std_of(&self, raw_tanh: f64) -> f64 {
        self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (raw_tanh + 1.0)
    }

    /// Samples `a = squash(mean + std * noise)` for a batch of observations.
    pub fn sample_with_noise(&self, obs: ArrayView2<f64>, noise: &Array2<f64>) -> Result<PolicySample> {
        let d = self.act_dim();
        let n = obs.nrows();
        if noise.dim() != (n, d) {
            return Err(Error::Shape { expected: n * d, got: noise.len() });
        }
        let trace = self.net.forward_batch(obs)?;
        let out = trace.output();
        let raw_tanh = out.slice(s![.., d..]).mapv(f64::tanh);
        let stds = raw_tanh.mapv(|r| self.log_std_of(r).exp());
        let mut squashed = Array2::zeros((n, d));
        let mut actions = Array2::zeros((n, d));
        let mut log_probs = vec![0.0; n];
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..d {
                let eps = noise[[i, j]];
                let ls = self.log_std_of(raw_tanh[[i, j]]);
                let u = out[[i, j]] + stds[[i, j]] * eps;
                let y = u.tanh();
                squashed[[i, j]] = y;
                actions[[i, j]] = self.squash(j, y);
                lp += -0.5 * eps * eps - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u) - self.half_range(j).ln();
            }
            log_probs[i] = lp;
        }
        Ok(PolicySample { actions, log_probs, trace, squashed, noise: noise.clone(), stds, raw_tanh })
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, rng: &mut R) -> Result<PolicySample> {
        let noise = Array2::from_shape_simple_fn((obs.nrows(), self.act_dim()), || rng.sample(StandardNormal));
        self.sample_with_noise(obs, &noise)
    }

    /// Gradients of a loss `L(actions, log_probs)` given `dL/da` and
    /// `dL/dlog_prob` for every sample.
    pub fn backward(&self, sample: &PolicySample, d_actions: &Array2<f64>, d_log_probs: &[f64]) -> Result<Gradients> {
        let d = self.act_dim();
        let n = sample.actions.nrows();
        if d_actions.dim() != (n, d) {
            return Err(Error::Shape { expected: n * d, got: d_actions.len() });
        }
        check_len(n, d_log_probs.len())?;
        let ls_span = 0.5 * (self.log_std_max - self.log_std_min);
        let mut upstream = Array2::zeros((n, 2 * d));
        for i in 0..n {
            let gl = d_log_probs[i];
            for j in 0..d {
                let y = sample.squashed[[i, j]];
                let g_u = d_actions[[i, j]] * self.half_range(j) * (1.0 - y * y) + gl * 2.0 * y;
                let g_ls = g_u * sample.stds[[i, j]] * sample.noise[[i, j]] - gl;
                let rt = sample.raw_tanh[[i, j]];
                upstream[[i, j]] = g_u;
                upstream[[i, d + j]] = g_ls * ls_span * (1.0 - rt * rt);
            }
        }
        Ok(self.net.backward(&sample.trace, &upstream)?.0)
    }

    /// Single-observation action. Stochastic mode also returns the log-prob.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], mode: ActionMode, rng: &mut R) -> Result<(Vec<f64>, Option<f64>)> {
        check_len(self.obs_dim(), obs.len())?;
        let view = ArrayView2::from_shape((1, obs.len()), obs).expect("contiguous");
        match mode {
            ActionMode::Stochastic => {
                let s = self.sample(view, rng)?;
                Ok((s.actions.row(0).to_vec(), Some(s.log_probs[0])))
            }
            ActionMode::Deterministic => {
                let out = self.net.forward(obs)?;
                let a = (0..self.act_dim()).map(|j| self.squash(j, out[j].tanh())).collect();
                Ok((a, None))
            }
        }
    }

    /// Log-density of a given in-box action.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        check_len(self.act_dim(), action.len())?;
        let out = self.net.forward(obs)?;
        let d = self.act_dim();
        let mut lp = 0.0;
        for j in 0..d {
            let y = ((action[j] - self.low[j]) / self.half_range(j) - 1.0).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            let u = y.atanh();
            let ls = self.log_std_of(out[d + j].tanh());
            let z = (u - out[j]) / ls.exp();
            lp += -0.5 * z * z - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u) - self.half_range(j).ln();
        }
        Ok(lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64, obs: usize, act: usize, low: f64, high: f64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[obs, 8, 2 * act], 1.0, &mut rng).unwrap();
        GaussianPolicy::new(net, vec![low; act], vec![high; act]).unwrap()
    }

    #[test]
    fn deterministic_mode_is_repeatable() {
        let p = policy(1, 3, 2, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = p.act(&[0.1, 0.2, 0.3], ActionMode::Deterministic, &mut rng).unwrap();
        let b = p.act(&[0.1, 0.2, 0.3], ActionMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.1.is_none());
    }

    #[test]
    fn samples_stay_in_box() {
        let p = policy(2, 2, 3, -0.5, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = Array2::from_shape_fn((1000, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        for _ in 0..100 {
            let s = p.sample(obs.view(), &mut rng).unwrap();
            assert!(s.actions.iter().all(|&a| (-0.5..=2.0).contains(&a)));
            assert!(s.log_probs.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn sampled_log_prob_matches_density() {
        let p = policy(3, 2, 2, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = [0.4, -0.3];
        for _ in 0..20 {
            let (a, lp) = p.act(&obs, ActionMode::Stochastic, &mut rng).unwrap();
            let direct = p.log_prob(&obs, &a).unwrap();
            assert!((lp.unwrap() - direct).abs() < 1e-6, "{lp:?} vs {direct}");
        }
    }

    #[test]
    fn shape_errors() {
        let p = policy(4, 3, 1, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.act(&[0.0], ActionMode::Deterministic, &mut rng).is_err());
        let net = Mlp::zeros(&[2, 3]);
        assert!(GaussianPolicy::new(net, vec![0.0], vec![1.0]).is_err());
    }
    #[test]
    fn gradients_match_finite_differences() {
        let p = policy(5, 2, 2, -1.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 * 0.5 - j as f64) * 0.7);
        let noise: Array2<f64> = Array2::from_shape_simple_fn((4, 2), || rng.sample(StandardNormal));
        let w_a = Array2::from_shape_fn((4, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
        let w_l = [0.7, -0.4, 0.05, 1.1];
        let loss = |q: &GaussianPolicy| {
            let s = q.sample_with_noise(obs.view(), &noise).unwrap();
            (&s.actions * &w_a).sum() + s.log_probs.iter().zip(w_l).map(|(l, w)| l * w).sum::<f64>()
        };
        let sample = p.sample_with_noise(obs.view(), &noise).unwrap();
        let analytic = p.backward(&sample, &w_a, &w_l).unwrap().flatten();
        let flat = p.net.flatten();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut q = p.clone();
            let mut v = flat.clone();
            v[k] += h;
            q.net.set_flat(&v).unwrap();
            let plus = loss(&q);
            v[k] -= 2.0 * h;
            q.net.set_flat(&v).unwrap();
            let fd = (plus - loss(&q)) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1e-3);
            assert!((fd - analytic[k]).abs() / scale < 1e-4, "param {k}: {fd} vs {}", analytic[k]);
        }
    }

    fn gauss_cdf_by_simpson(upper: f64, mean: f64, std: f64) -> f64 {
        // integrate the normal density from mean - 12 std
        let lo = mean - 12.0 * std;
        if upper <= lo {
            return 0.0;
        }
        let n = 20_000;
        let h = (upper - lo) / n as f64;
        let pdf = |u: f64| (-0.5 * ((u - mean) / std).powi(2)).exp() / (std * (2.0 * std::f64::consts::PI).sqrt());
        let mut acc = pdf(lo) + pdf(upper);
        for k in 1..n {
            acc += pdf(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn log_prob_matches_quadrature_of_squashed_density() {
        let mut net = Mlp::zeros(&[1, 2]);
        // mean head 0.4, raw log-std head chosen so std is moderate
        net.set_flat(&[0.0, 0.0, 0.4, 0.3]).unwrap();
        let p = GaussianPolicy::new(net, vec![0.0], vec![2.0]).unwrap();
        let out = p.net.forward(&[0.0]).unwrap();
        let std = p.log_std_of(out[1].tanh()).exp();
        let cdf = |a: f64| gauss_cdf_by_simpson((a - 1.0).atanh(), out[0], std);
        let h = 1e-4;
        for a in [0.2, 0.7, 1.0, 1.4, 1.8, 1.95] {
            let density = (cdf(a + h) - cdf(a - h)) / (2.0 * h);
            let lp = p.log_prob(&[0.0], &[a]).unwrap();
            assert!((lp - density.ln()).abs() < 1e-3, "a={a}: {lp} vs {}", density.ln());
        }
        let total = cdf(2.0 - 1e-12);
        assert!((total - 1.0).abs() < 1e-3);
    }
}
