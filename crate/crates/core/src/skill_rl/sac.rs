//! Soft actor-critic over skill-conditioned policies with a fixed entropy
//! temperature.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::models::{Discriminator, SkillDynamics};
use super::{augment, descriptor_prior_features, shape_reward, ShapingConfig, SkillError, SkillSet};
use crate::envs::{EnvKind, ACTION_DIM};
use crate::nn::{self, soft_update, Activation, Adam, Genotype, NetSpec, Tape, LOG_STD_MAX, LOG_STD_MIN};
use crate::qd::{concat_rows, Batch, BufferError, ReplayBuffer};
use crate::rng;

/// Inside the log of the tanh correction.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha: f64,
    pub discount: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha: 0.1,
            discount: 0.99,
            tau: 0.005,
            batch_size: 256,
            buffer_capacity: 1_000_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SkillError> {
        if !(self.alpha > 0.0) {
            return Err(SkillError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.discount) || self.batch_size == 0 {
            return Err(SkillError::Config("tau and discount must lie in [0, 1] and the batch be non-empty".into()));
        }
        Ok(())
    }
}

/// Squashed-gaussian samples of a batch: actions in `(-1, 1)`, their log
/// densities and the quantities needed for the reparameterised gradient.
pub struct PolicySample {
    pub tape: Tape,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    noise: Vec<f64>,
}

/// Samples `tanh(mu + sigma * eps)` for every row of the policy output.
pub fn sample_policy<R: Rng + ?Sized>(
    spec: &NetSpec,
    params: &[f64],
    inputs: &[f64],
    batch: usize,
    rng: &mut R,
) -> Result<PolicySample, SkillError> {
    let tape = spec.forward_batch(params, inputs, batch)?;
    let mut actions = Vec::with_capacity(batch * ACTION_DIM);
    let mut log_probs = Vec::with_capacity(batch);
    let mut noise = Vec::with_capacity(batch * ACTION_DIM);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for row in tape.output().chunks_exact(2 * ACTION_DIM) {
        let (mu, log_std) = nn::gaussian_head(row);
        let mut lp = 0.0;
        for (m, ls) in mu.iter().zip(&log_std) {
            let e: f64 = rng.sample(StandardNormal);
            let a = nn::tanh(m + ls.exp() * e);
            lp += -0.5 * e * e - ls - half_log_2pi - (1.0 - a * a + SQUASH_EPS).ln();
            actions.push(a);
            noise.push(e);
        }
        log_probs.push(lp);
    }
    Ok(PolicySample { tape, actions, log_probs, noise })
}

impl PolicySample {
    /// Upstream gradient on the raw policy output of
    /// `mean(alpha * log_pi - Q)` given `dQ/da` per row.
    fn upstream(&self, dq_da: &[f64], alpha: f64) -> Vec<f64> {
        let batch = self.log_probs.len() as f64;
        let mut up = Vec::with_capacity(self.actions.len() * 2);
        for (((row, a), e), g) in self
            .tape
            .output()
            .chunks_exact(2 * ACTION_DIM)
            .zip(self.actions.chunks_exact(ACTION_DIM))
            .zip(self.noise.chunks_exact(ACTION_DIM))
            .zip(dq_da.chunks_exact(ACTION_DIM))
        {
            let mut d_mu = [0.0; ACTION_DIM];
            let mut d_ls = [0.0; ACTION_DIM];
            for i in 0..ACTION_DIM {
                let raw_ls = row[ACTION_DIM + i];
                let sigma = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
                let one_minus = 1.0 - a[i] * a[i];
                // d log_pi / du through the squashing correction.
                let dlp_du = 2.0 * a[i] * one_minus / (one_minus + SQUASH_EPS);
                let dq_du = g[i] * one_minus;
                d_mu[i] = (alpha * dlp_du - dq_du) / batch;
                d_ls[i] = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
                    (alpha * (-1.0 + dlp_du * sigma * e[i]) - dq_du * sigma * e[i]) / batch
                } else {
                    0.0
                };
            }
            up.extend_from_slice(&d_mu);
            up.extend_from_slice(&d_ls);
        }
        up
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SacStats {
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacState {
    pub policy_spec: NetSpec,
    pub critic_spec: NetSpec,
    pub policy: Genotype,
    pub critic1: Genotype,
    pub critic2: Genotype,
    pub target_critic1: Genotype,
    pub target_critic2: Genotype,
    opt_policy: Adam,
    opt_critic1: Adam,
    opt_critic2: Adam,
    pub num_skills: usize,
    pub updates: u64,
}

impl SacState {
    pub fn new(obs_dim: usize, num_skills: usize, cfg: &SacConfig, seed: u64) -> Result<Self, SkillError> {
        cfg.validate()?;
        let policy_spec = SkillSet::policy_spec(obs_dim, num_skills, &cfg.policy_hidden)?;
        let critic_spec = NetSpec::mlp(
            obs_dim + num_skills + ACTION_DIM,
            &cfg.critic_hidden,
            1,
            Activation::Relu,
            nn::OutputHead::Linear,
        )?;
        let mut r = rng::stream(seed, &[rng::tag::INIT, rng::tag::CRITIC]);
        let policy = Genotype::random_small_head(&policy_spec, &mut r, 0.1);
        let critic1 = Genotype::random(&critic_spec, &mut r);
        let critic2 = Genotype::random(&critic_spec, &mut r);
        Ok(Self {
            opt_policy: Adam::new(policy.len(), cfg.policy_lr),
            opt_critic1: Adam::new(critic1.len(), cfg.critic_lr),
            opt_critic2: Adam::new(critic2.len(), cfg.critic_lr),
            target_critic1: critic1.clone(),
            target_critic2: critic2.clone(),
            policy,
            critic1,
            critic2,
            policy_spec,
            critic_spec,
            num_skills,
            updates: 0,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy_spec.input_dim() - self.num_skills
    }

    pub fn skill_set(&self) -> Result<SkillSet, SkillError> {
        SkillSet::new(self.policy_spec.clone(), self.policy.clone(), self.num_skills)
    }

    fn critic_input(&self, aug: &[f64], actions: &[f64]) -> Vec<f64> {
        concat_rows(aug, self.obs_dim() + self.num_skills, actions, ACTION_DIM)
    }

    /// `min(Q1, Q2)` of the online critics.
    pub fn q_min(&self, aug: &[f64], actions: &[f64], batch: usize) -> Result<Vec<f64>, SkillError> {
        let input = self.critic_input(aug, actions);
        let q1 = self.critic_spec.forward_batch(&self.critic1.params, &input, batch)?;
        let q2 = self.critic_spec.forward_batch(&self.critic2.params, &input, batch)?;
        Ok(q1.output().iter().zip(q2.output()).map(|(a, b)| a.min(*b)).collect())
    }

    /// Monte-Carlo entropy estimate `-E[log pi]` over `aug` rows.
    pub fn entropy<R: Rng + ?Sized>(&self, aug: &[f64], batch: usize, rng: &mut R) -> Result<f64, SkillError> {
        let s = sample_policy(&self.policy_spec, &self.policy.params, aug, batch, rng)?;
        Ok(-s.log_probs.iter().sum::<f64>() / batch as f64)
    }

    /// One SAC step on `batch` with externally supplied (shaped) rewards.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        rewards: &[f64],
        cfg: &SacConfig,
        rng: &mut R,
    ) -> Result<SacStats, SkillError> {
        let n = batch.size;
        let obs = self.obs_dim();
        let aug = augment(&batch.states, obs, &batch.skills, self.num_skills);
        let next_aug = augment(&batch.next_states, obs, &batch.skills, self.num_skills);

        // Soft Bellman targets.
        let next = sample_policy(&self.policy_spec, &self.policy.params, &next_aug, n, rng)?;
        let next_input = self.critic_input(&next_aug, &next.actions);
        let tq1 = self.critic_spec.forward_batch(&self.target_critic1.params, &next_input, n)?;
        let tq2 = self.critic_spec.forward_batch(&self.target_critic2.params, &next_input, n)?;
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let not_done = if batch.terminals[i] { 0.0 } else { 1.0 };
                let v = tq1.output()[i].min(tq2.output()[i]) - cfg.alpha * next.log_probs[i];
                rewards[i] + cfg.discount * not_done * v
            })
            .collect();

        let input = self.critic_input(&aug, &batch.actions);
        let mut critic_loss = 0.0;
        for (critic, opt) in [
            (&mut self.critic1, &mut self.opt_critic1),
            (&mut self.critic2, &mut self.opt_critic2),
        ] {
            let tape = self.critic_spec.forward_batch(&critic.params, &input, n)?;
            let up: Vec<f64> = tape.output().iter().zip(&y).map(|(q, y)| 2.0 * (q - y) / n as f64).collect();
            critic_loss += tape.output().iter().zip(&y).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / n as f64;
            let mut grad = vec![0.0; critic.len()];
            self.critic_spec.backward_batch(&critic.params, &tape, &up, &mut grad)?;
            opt.step(critic, &grad)?;
        }

        // Reparameterised policy step against the updated critics.
        let cur = sample_policy(&self.policy_spec, &self.policy.params, &aug, n, rng)?;
        let pin = self.critic_input(&aug, &cur.actions);
        let c1 = self.critic_spec.forward_batch(&self.critic1.params, &pin, n)?;
        let c2 = self.critic_spec.forward_batch(&self.critic2.params, &pin, n)?;
        let pick1: Vec<f64> = (0..n).map(|i| f64::from(u8::from(c1.output()[i] <= c2.output()[i]))).collect();
        let pick2: Vec<f64> = pick1.iter().map(|p| 1.0 - p).collect();
        let g1 = self.critic_spec.input_grad_batch(&self.critic1.params, &c1, &pick1)?;
        let g2 = self.critic_spec.input_grad_batch(&self.critic2.params, &c2, &pick2)?;
        let width = obs + self.num_skills + ACTION_DIM;
        let mut dq_da = Vec::with_capacity(n * ACTION_DIM);
        for (r1, r2) in g1.chunks_exact(width).zip(g2.chunks_exact(width)) {
            for k in width - ACTION_DIM..width {
                dq_da.push(r1[k] + r2[k]);
            }
        }
        let policy_loss = (0..n)
            .map(|i| cfg.alpha * cur.log_probs[i] - c1.output()[i].min(c2.output()[i]))
            .sum::<f64>()
            / n as f64;
        let entropy = -cur.log_probs.iter().sum::<f64>() / n as f64;
        let up = cur.upstream(&dq_da, cfg.alpha);
        let mut grad = vec![0.0; self.policy.len()];
        self.policy_spec.backward_batch(&self.policy.params, &cur.tape, &up, &mut grad)?;
        self.opt_policy.step(&mut self.policy, &grad)?;

        soft_update(&mut self.target_critic1, &self.critic1, cfg.tau);
        soft_update(&mut self.target_critic2, &self.critic2, cfg.tau);
        self.updates += 1;
        Ok(SacStats { critic_loss: critic_loss / 2.0, policy_loss, entropy })
    }
}

/// The learned diversity signal, if any.
#[derive(Debug, Clone, Copy)]
pub enum IntrinsicModel<'a> {
    None,
    Diayn(&'a Discriminator),
    Dads(&'a SkillDynamics),
}

/// How buffer observations map to discriminator / dynamics inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub kind: EnvKind,
    pub use_prior: bool,
    pub obs_dim: usize,
}

impl FeatureMap {
    pub fn features(&self, states: &[f64]) -> Vec<f64> {
        states
            .chunks_exact(self.obs_dim)
            .flat_map(|s| descriptor_prior_features(s, self.kind, self.use_prior))
            .collect()
    }

    /// Feature increments `f(s') - f(s)`.
    pub fn deltas(&self, states: &[f64], next_states: &[f64]) -> Vec<f64> {
        self.features(next_states)
            .iter()
            .zip(self.features(states))
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Per-transition intrinsic rewards of a batch.
pub fn intrinsic_rewards(model: IntrinsicModel<'_>, batch: &Batch, map: &FeatureMap) -> Result<Vec<f64>, SkillError> {
    Ok(match model {
        IntrinsicModel::None => vec![0.0; batch.size],
        IntrinsicModel::Diayn(d) => d.rewards(&map.features(&batch.next_states), &batch.skills)?,
        IntrinsicModel::Dads(m) => m.rewards(&map.deltas(&batch.states, &batch.next_states), &batch.skills)?,
    })
}

/// Rewards of a batch after mixing the task and diversity terms.
pub fn shaped_rewards(
    model: IntrinsicModel<'_>,
    batch: &Batch,
    map: &FeatureMap,
    shaping: &ShapingConfig,
) -> Result<Vec<f64>, SkillError> {
    let div = intrinsic_rewards(model, batch, map)?;
    Ok((0..batch.size)
        .map(|i| shape_reward(batch.rewards[i], div[i], shaping, batch.episode_returns[i]))
        .collect())
}

/// Samples a batch, computes its rewards online and takes one SAC step.
pub fn sac_update<R: Rng + ?Sized>(
    sac: &mut SacState,
    buffer: &ReplayBuffer,
    shaping: &ShapingConfig,
    model: IntrinsicModel<'_>,
    map: &FeatureMap,
    cfg: &SacConfig,
    rng: &mut R,
) -> Result<SacStats, SkillError> {
    if buffer.is_empty() {
        return Err(BufferError::Empty.into());
    }
    let batch = buffer.sample(cfg.batch_size, rng)?;
    let rewards = shaped_rewards(model, &batch, map, shaping)?;
    sac.update(&batch, &rewards, cfg, rng)
}
