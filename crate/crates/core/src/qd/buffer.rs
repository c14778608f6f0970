//! Flat ring buffer of transitions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Trajectory;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BufferError {
    #[error("replay buffer is empty")]
    Empty,
    #[error("transition has {got} values for a field of width {expected}")]
    Width { expected: usize, got: usize },
}

/// Transitions stored column-wise. Actions are normalised to `[-1, 1]`.
/// Each transition also carries the return of its episode and, for
/// skill-conditioned learners, the skill that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    len: usize,
    head: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    next_states: Vec<f64>,
    rewards: Vec<f64>,
    terminals: Vec<bool>,
    episode_returns: Vec<f64>,
    skills: Vec<u32>,
}

/// A sampled minibatch, row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub next_states: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub episode_returns: Vec<f64>,
    pub skills: Vec<u32>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay buffer needs a positive capacity");
        Self {
            capacity,
            obs_dim,
            act_dim,
            len: 0,
            head: 0,
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            episode_returns: Vec::new(),
            skills: Vec::new(),
        }
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

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        state: &[f64],
        action: &[f64],
        next_state: &[f64],
        reward: f64,
        terminal: bool,
        episode_return: f64,
        skill: u32,
    ) -> Result<(), BufferError> {
        for (got, expected) in [
            (state.len(), self.obs_dim),
            (action.len(), self.act_dim),
            (next_state.len(), self.obs_dim),
        ] {
            if got != expected {
                return Err(BufferError::Width { expected, got });
            }
        }
        if self.len < self.capacity {
            self.states.extend_from_slice(state);
            self.actions.extend_from_slice(action);
            self.next_states.extend_from_slice(next_state);
            self.rewards.push(reward);
            self.terminals.push(terminal);
            self.episode_returns.push(episode_return);
            self.skills.push(skill);
            self.len += 1;
        } else {
            let i = self.head;
            let (o, a) = (self.obs_dim, self.act_dim);
            self.states[i * o..(i + 1) * o].copy_from_slice(state);
            self.actions[i * a..(i + 1) * a].copy_from_slice(action);
            self.next_states[i * o..(i + 1) * o].copy_from_slice(next_state);
            self.rewards[i] = reward;
            self.terminals[i] = terminal;
            self.episode_returns[i] = episode_return;
            self.skills[i] = skill;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    /// Appends every transition of `traj`, dividing actions by `bound` and
    /// tagging them with the trajectory's fitness as episode return.
    pub fn push_trajectory(&mut self, traj: &Trajectory, bound: f64, skill: u32) -> Result<(), BufferError> {
        let mut a = vec![0.0; self.act_dim];
        for t in &traj.transitions {
            for (dst, src) in a.iter_mut().zip(&t.action) {
                *dst = src / bound;
            }
            self.push(&t.state, &a, &t.next_state, t.reward, t.terminal, traj.fitness, skill)?;
        }
        Ok(())
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<usize>, BufferError> {
        if self.is_empty() {
            return Err(BufferError::Empty);
        }
        Ok((0..size).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (o, a) = (self.obs_dim, self.act_dim);
        let mut b = Batch {
            size: idx.len(),
            ..Batch::default()
        };
        for &i in idx {
            b.states.extend_from_slice(&self.states[i * o..(i + 1) * o]);
            b.actions.extend_from_slice(&self.actions[i * a..(i + 1) * a]);
            b.next_states.extend_from_slice(&self.next_states[i * o..(i + 1) * o]);
            b.rewards.push(self.rewards[i]);
            b.terminals.push(self.terminals[i]);
            b.episode_returns.push(self.episode_returns[i]);
            b.skills.push(self.skills[i]);
        }
        b
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Batch, BufferError> {
        let idx = self.sample_indices(size, rng)?;
        Ok(self.gather(&idx))
    }

    /// Row-major states of a uniform sample.
    pub fn sample_states<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<f64>, BufferError> {
        let idx = self.sample_indices(size, rng)?;
        let o = self.obs_dim;
        let mut out = Vec::with_capacity(size * o);
        for i in idx {
            out.extend_from_slice(&self.states[i * o..(i + 1) * o]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 1, 1);
        for i in 0..5 {
            let v = i as f64;
            b.push(&[v], &[0.0], &[v + 1.0], v, false, 0.0, 0).unwrap();
        }
        assert_eq!(b.len(), 3);
        let mut rewards = b.gather(&[0, 1, 2]).rewards;
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_sample_fails() {
        let b = ReplayBuffer::new(3, 1, 1);
        assert_eq!(b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)), Err(BufferError::Empty));
    }

    #[test]
    fn wrong_width_rejected() {
        let mut b = ReplayBuffer::new(3, 2, 1);
        assert!(b.push(&[0.0], &[0.0], &[0.0, 0.0], 0.0, false, 0.0, 0).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(4, 1, 1);
        for i in 0..4 {
            b.push(&[0.0], &[0.0], &[0.0], i as f64, false, 0.0, 0).unwrap();
        }
        let n = 40_000;
        let batch = b.sample(n, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for k in 0..4 {
            let c = batch.rewards.iter().filter(|&&r| r == k as f64).count() as f64 / n as f64;
            let se = (0.25 * 0.75 / n as f64).sqrt();
            assert!((c - 0.25).abs() < 4.0 * se);
        }
    }
}
