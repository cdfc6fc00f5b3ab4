//! Fixed-capacity ring buffer of transitions.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;

use crate::error::{check_len, Error, Result};

/// A sampled minibatch, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_obs: Vec<f64>,
    dones: Vec<f64>,
    len: usize,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * act_dim],
            rewards: vec![0.0; capacity],
            next_obs: vec![0.0; capacity * obs_dim],
            dones: vec![0.0; capacity],
            len: 0,
            next: 0,
            inserted: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of transitions ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], reward: f64, next_obs: &[f64], done: bool) -> Result<()> {
        check_len(self.obs_dim, obs.len())?;
        check_len(self.act_dim, action.len())?;
        check_len(self.obs_dim, next_obs.len())?;
        let i = self.next;
        self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(obs);
        self.actions[i * self.act_dim..(i + 1) * self.act_dim].copy_from_slice(action);
        self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(next_obs);
        self.rewards[i] = reward;
        self.dones[i] = if done { 1.0 } else { 0.0 };
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        self.inserted += 1;
        Ok(())
    }

    /// Rewards currently stored, oldest first.
    pub fn rewards_in_order(&self) -> Vec<f64> {
        let start = if self.len < self.capacity { 0 } else { self.next };
        (0..self.len).map(|k| self.rewards[(start + k) % self.capacity]).collect()
    }

    /// Uniform sample without replacement inside the batch.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        if self.len == 0 {
            return Err(Error::Contract("cannot sample from an empty replay buffer".into()));
        }
        let n = batch_size.min(self.len);
        let picks = index::sample(rng, self.len, n);
        let mut batch = Batch {
            obs: Array2::zeros((n, self.obs_dim)),
            actions: Array2::zeros((n, self.act_dim)),
            rewards: Vec::with_capacity(n),
            next_obs: Array2::zeros((n, self.obs_dim)),
            dones: Vec::with_capacity(n),
        };
        for (row, i) in picks.iter().enumerate() {
            let o = i * self.obs_dim;
            let a = i * self.act_dim;
            batch.obs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.obs[o..o + self.obs_dim]);
            batch.next_obs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.next_obs[o..o + self.obs_dim]);
            batch.actions.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.actions[a..a + self.act_dim]);
            batch.rewards.push(self.rewards[i]);
            batch.dones.push(self.dones[i]);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn keeps_most_recent_capacity(capacity in 1usize..20, n in 0usize..60) {
            let mut buf = ReplayBuffer::new(capacity, 2, 1).unwrap();
            for k in 0..n {
                let v = k as f64;
                buf.push(&[v, v], &[v], v, &[v, v], false).unwrap();
            }
            prop_assert_eq!(buf.len(), n.min(capacity));
            let expected: Vec<f64> = (n.saturating_sub(capacity)..n).map(|k| k as f64).collect();
            prop_assert_eq!(buf.rewards_in_order(), expected);
        }
    }

    #[test]
    fn sampling_is_without_replacement_and_seeded() {
        let mut buf = ReplayBuffer::new(50, 1, 1).unwrap();
        for k in 0..30 {
            let v = k as f64;
            buf.push(&[v], &[v], v, &[v + 1.0], k % 7 == 0).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = buf.sample(30, &mut rng).unwrap();
        let mut r = b.rewards.clone();
        r.sort_by(f64::total_cmp);
        r.dedup();
        assert_eq!(r.len(), 30);
        for row in 0..b.len() {
            assert_eq!(b.obs[[row, 0]], b.rewards[row]);
            assert_eq!(b.next_obs[[row, 0]], b.rewards[row] + 1.0);
        }
        let again = buf.sample(30, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn empty_and_bad_shapes() {
        let mut buf = ReplayBuffer::new(4, 2, 1).unwrap();
        assert!(buf.sample(2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(buf.push(&[0.0], &[0.0], 0.0, &[0.0, 0.0], false).is_err());
        assert!(ReplayBuffer::new(0, 1, 1).is_err());
    }
}
