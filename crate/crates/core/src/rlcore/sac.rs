//! Soft actor-critic with twin critics, target networks and a fixed
//! entropy temperature.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::Mlp;
use super::policy::{ActionMode, GaussianPolicy};
use super::replay::{Batch, ReplayBuffer};
use crate::checkpoint::{RecordReader, RecordWriter};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Polyak rate for the target critics.
    pub target_rate: f64,
    /// Fixed entropy temperature.
    pub temperature: f64,
    pub batch_size: usize,
    /// Uniform-random exploration steps before the policy acts.
    pub warmup_steps: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Multiplies rewards before they enter the critic targets.
    pub reward_scale: f64,
    pub rng_seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            target_rate: 0.005,
            temperature: 0.05,
            batch_size: 256,
            warmup_steps: 1000,
            hidden: vec![64, 64],
            buffer_capacity: 100_000,
            reward_scale: 1.0,
            rng_seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(Error::Config("target_rate must lie in [0, 1]".into()));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(Error::Config("reward_scale must be positive".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::Config("need 1 <= batch_size <= buffer_capacity".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Losses and statistics from one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateDiagnostics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_q: f64,
    pub mean_log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub config: SacConfig,
    pub policy: GaussianPolicy,
    critics: [Mlp; 2],
    targets: [Mlp; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    steps: u64,
    updates: u64,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl SacAgent {
    pub fn new(obs_dim: usize, low: Vec<f64>, high: Vec<f64>, config: SacConfig) -> Result<Self> {
        config.validate()?;
        let act_dim = low.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let actor = Mlp::new(&widths(obs_dim, &config.hidden, 2 * act_dim), 0.1, &mut rng)?;
        let policy = GaussianPolicy::new(actor, low, high)?;
        let cw = widths(obs_dim + act_dim, &config.hidden, 1);
        let critics = [Mlp::new(&cw, 1.0, &mut rng)?, Mlp::new(&cw, 1.0, &mut rng)?];
        let targets = critics.clone();
        let actor_opt = Adam::new(&policy.net, config.actor_lr);
        let critic_opts = [Adam::new(&critics[0], config.critic_lr), Adam::new(&critics[1], config.critic_lr)];
        let buffer = ReplayBuffer::new(config.buffer_capacity, obs_dim, act_dim)?;
        Ok(SacAgent { config, policy, critics, targets, actor_opt, critic_opts, buffer, rng, steps: 0, updates: 0 })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.policy.act_dim()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Exploration action: uniform over the box during warm-up, then a
    /// policy sample.
    pub fn explore(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.obs_dim(), obs.len())?;
        self.steps += 1;
        if self.steps <= self.config.warmup_steps as u64 {
            let (low, high) = (self.policy.low().to_vec(), self.policy.high().to_vec());
            return Ok(low.iter().zip(&high).map(|(&l, &h)| self.rng.random_range(l..=h)).collect());
        }
        let (a, _) = self.policy.act(obs, ActionMode::Stochastic, &mut self.rng)?;
        Ok(a)
    }

    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.policy.act(obs, ActionMode::Deterministic, &mut unused)?.0)
    }

    pub fn remember(&mut self, obs: &[f64], action: &[f64], reward: f64, next_obs: &[f64], done: bool) -> Result<()> {
        self.buffer.push(obs, action, reward, next_obs, done)
    }

    /// One update from a fresh minibatch, or `None` while the buffer holds
    /// fewer than `batch_size` transitions.
    pub fn update(&mut self) -> Result<Option<UpdateDiagnostics>> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
        self.sac_update(&batch).map(Some)
    }

    fn q_values(net: &Mlp, obs: &Array2<f64>, actions: &Array2<f64>) -> Result<Vec<f64>> {
        let x = concatenate![Axis(1), *obs, *actions];
        Ok(net.forward_batch(x.view())?.output().column(0).to_vec())
    }

    /// Bootstrapped entropy-regularized critic targets for a batch.
    pub fn critic_targets(&mut self, batch: &Batch) -> Result<Vec<f64>> {
        let next = self.policy.sample(batch.next_obs.view(), &mut self.rng)?;
        let q1 = Self::q_values(&self.targets[0], &batch.next_obs, &next.actions)?;
        let q2 = Self::q_values(&self.targets[1], &batch.next_obs, &next.actions)?;
        let (gamma, alpha) = (self.config.gamma, self.config.temperature);
        Ok((0..batch.len())
            .map(|i| {
                let soft = q1[i].min(q2[i]) - alpha * next.log_probs[i];
                self.config.reward_scale * batch.rewards[i] + gamma * (1.0 - batch.dones[i]) * soft
            })
            .collect())
    }

    pub fn sac_update(&mut self, batch: &Batch) -> Result<UpdateDiagnostics> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let targets = self.critic_targets(batch)?;

        let sa = concatenate![Axis(1), batch.obs, batch.actions];
        let mut critic_loss = 0.0;
        let mut mean_q = 0.0;
        for k in 0..2 {
            let trace = self.critics[k].forward_batch(sa.view())?;
            let q = trace.output();
            let mut upstream = Array2::zeros((n, 1));
            for i in 0..n {
                let diff = q[[i, 0]] - targets[i];
                critic_loss += 0.5 * diff * diff * inv_n;
                mean_q += q[[i, 0]] * inv_n * 0.5;
                upstream[[i, 0]] = diff * inv_n;
            }
            let (grads, _) = self.critics[k].backward(&trace, &upstream)?;
            self.critic_opts[k].step(&mut self.critics[k], &grads);
        }

        let alpha = self.config.temperature;
        let sample = self.policy.sample(batch.obs.view(), &mut self.rng)?;
        let pa = concatenate![Axis(1), batch.obs, sample.actions];
        let traces = [self.critics[0].forward_batch(pa.view())?, self.critics[1].forward_batch(pa.view())?];
        let mut ups = [Array2::zeros((n, 1)), Array2::zeros((n, 1))];
        let mut actor_loss = 0.0;
        for i in 0..n {
            let (a, b) = (traces[0].output()[[i, 0]], traces[1].output()[[i, 0]]);
            let k = if a <= b { 0 } else { 1 };
            actor_loss += (alpha * sample.log_probs[i] - a.min(b)) * inv_n;
            ups[k][[i, 0]] = -inv_n;
        }
        let obs_dim = self.obs_dim();
        let mut d_actions = Array2::zeros((n, self.act_dim()));
        for k in 0..2 {
            let (_, d_in) = self.critics[k].backward(&traces[k], &ups[k])?;
            d_actions += &d_in.slice(ndarray::s![.., obs_dim..]);
        }
        let d_log_probs = vec![alpha * inv_n; n];
        let grads = self.policy.backward(&sample, &d_actions, &d_log_probs)?;
        self.actor_opt.step(&mut self.policy.net, &grads);

        for k in 0..2 {
            self.targets[k].soft_update_from(&self.critics[k], self.config.target_rate);
        }
        self.updates += 1;

        let mean_log_prob = sample.log_probs.iter().sum::<f64>() * inv_n;
        let diag = UpdateDiagnostics { critic_loss, actor_loss, mean_q, mean_log_prob };
        if !(critic_loss.is_finite() && actor_loss.is_finite() && self.policy.net.is_finite()) {
            return Err(Error::Divergence(format!("non-finite SAC update {} ({diag:?})", self.updates)));
        }
        Ok(diag)
    }

    /// Config echo followed by the policy parameters.
    pub fn write_record(&self, w: &mut RecordWriter) {
        write_config(&self.config, w);
        write_policy(&self.policy, w);
    }

    /// Restores a policy-only agent (critics fresh) from a record.
    pub fn read_record(r: &mut RecordReader) -> Result<(SacConfig, GaussianPolicy)> {
        let config = read_config(r)?;
        let policy = read_policy(r)?;
        Ok((config, policy))
    }
}

fn write_config(c: &SacConfig, w: &mut RecordWriter) {
    w.f64(c.gamma).f64(c.actor_lr).f64(c.critic_lr).f64(c.target_rate).f64(c.temperature);
    w.f64(c.reward_scale);
    w.u64(c.batch_size as u64).u64(c.warmup_steps as u64).u64(c.buffer_capacity as u64).u64(c.rng_seed);
    w.u32(c.hidden.len() as u32);
    for &h in &c.hidden {
        w.u32(h as u32);
    }
}

fn read_config(r: &mut RecordReader) -> Result<SacConfig> {
    let (gamma, actor_lr, critic_lr, target_rate, temperature) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let reward_scale = r.f64()?;
    let (batch_size, warmup_steps, buffer_capacity, rng_seed) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let layers = r.u32()? as usize;
    if layers > 64 {
        return Err(Error::Checkpoint(format!("implausible hidden layer count {layers}")));
    }
    let hidden = (0..layers).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    Ok(SacConfig {
        gamma,
        actor_lr,
        critic_lr,
        target_rate,
        temperature,
        batch_size: batch_size as usize,
        warmup_steps: warmup_steps as usize,
        hidden,
        buffer_capacity: buffer_capacity as usize,
        reward_scale,
        rng_seed,
    })
}

pub fn write_policy(p: &GaussianPolicy, w: &mut RecordWriter) {
    let widths = p.net.widths();
    w.u32(widths.len() as u32);
    for &x in widths {
        w.u32(x as u32);
    }
    w.f64s(p.low()).f64s(p.high()).f64(p.log_std_min).f64(p.log_std_max);
    w.f64s(&p.net.flatten());
}

pub fn read_policy(r: &mut RecordReader) -> Result<GaussianPolicy> {
    let layers = r.u32()? as usize;
    if !(2..=64).contains(&layers) {
        return Err(Error::Checkpoint(format!("implausible layer count {layers}")));
    }
    let widths = (0..layers).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
    if widths.iter().any(|&x| x == 0 || x > 1 << 20) {
        return Err(Error::Checkpoint(format!("implausible widths {widths:?}")));
    }
    let (low, high) = (r.f64s()?, r.f64s()?);
    let (lmin, lmax) = (r.f64()?, r.f64()?);
    let mut net = Mlp::zeros(&widths);
    net.set_flat(&r.f64s()?).map_err(|e| Error::Checkpoint(format!("policy parameters: {e}")))?;
    let mut p = GaussianPolicy::new(net, low, high).map_err(|e| Error::Checkpoint(e.to_string()))?;
    p.log_std_min = lmin;
    p.log_std_max = lmax;
    Ok(p)
}
