//! Twin critics trained with TD3 and the policy-gradient variation built on
//! top of them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::buffer::{Batch, ReplayBuffer};
use super::QdError;
use crate::nn::{self, soft_update, Activation, Adam, Genotype, NetSpec, OutputHead, Tape};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub critic_hidden: Vec<usize>,
    pub critic_lr: f64,
    /// Learning rate of the policy-gradient variation.
    pub policy_lr: f64,
    /// Learning rate of the greedy actor that supplies target actions.
    pub greedy_actor_lr: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub discount: f64,
    pub reward_scaling: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub pg_steps: usize,
    pub policy_delay: usize,
    pub buffer_capacity: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            critic_hidden: vec![64, 64],
            critic_lr: 3e-4,
            policy_lr: 1e-3,
            greedy_actor_lr: 3e-4,
            policy_noise: 0.2,
            noise_clip: 0.5,
            discount: 0.99,
            reward_scaling: 1.0,
            tau: 0.005,
            batch_size: 256,
            critic_steps: 300,
            pg_steps: 100,
            policy_delay: 2,
            buffer_capacity: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3State {
    pub actor_spec: NetSpec,
    pub critic_spec: NetSpec,
    pub critic1: Genotype,
    pub critic2: Genotype,
    pub target_critic1: Genotype,
    pub target_critic2: Genotype,
    pub actor: Genotype,
    pub target_actor: Genotype,
    opt_critic1: Adam,
    opt_critic2: Adam,
    opt_actor: Adam,
    pub critic_updates: u64,
}

/// Row-wise concatenation of `a` (width `wa`) and `b` (width `wb`).
pub fn concat_rows(a: &[f64], wa: usize, b: &[f64], wb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.chunks_exact(wa).zip(b.chunks_exact(wb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    out
}

/// Forward pass of a deterministic actor on a batch: `(tape, tanh(out))`.
pub fn actor_actions(spec: &NetSpec, params: &[f64], states: &[f64], batch: usize) -> Result<(Tape, Vec<f64>), QdError> {
    let tape = spec.forward_batch(params, states, batch)?;
    let actions = tape.output().iter().map(|&v| nn::tanh(v)).collect();
    Ok((tape, actions))
}

impl Td3State {
    pub fn new(actor_spec: NetSpec, cfg: &Td3Config, seed: u64) -> Result<Self, QdError> {
        let obs = actor_spec.input_dim();
        let act = actor_spec.output_dim();
        let critic_spec = NetSpec::mlp(obs + act, &cfg.critic_hidden, 1, Activation::Relu, OutputHead::Linear)?;
        let mut r = rng::stream(seed, &[rng::tag::INIT, rng::tag::CRITIC]);
        let critic1 = Genotype::random(&critic_spec, &mut r);
        let critic2 = Genotype::random(&critic_spec, &mut r);
        let actor = Genotype::random(&actor_spec, &mut r);
        Ok(Self {
            opt_critic1: Adam::new(critic1.len(), cfg.critic_lr),
            opt_critic2: Adam::new(critic2.len(), cfg.critic_lr),
            opt_actor: Adam::new(actor.len(), cfg.greedy_actor_lr),
            target_critic1: critic1.clone(),
            target_critic2: critic2.clone(),
            target_actor: actor.clone(),
            critic1,
            critic2,
            actor,
            actor_spec,
            critic_spec,
            critic_updates: 0,
        })
    }

    fn obs_dim(&self) -> usize {
        self.actor_spec.input_dim()
    }

    fn act_dim(&self) -> usize {
        self.actor_spec.output_dim()
    }

    /// Clipped target-policy smoothing noise for a batch.
    pub fn smoothing_noise<R: Rng + ?Sized>(&self, batch: usize, cfg: &Td3Config, rng: &mut R) -> Vec<f64> {
        (0..batch * self.act_dim())
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                (e * cfg.policy_noise).clamp(-cfg.noise_clip, cfg.noise_clip)
            })
            .collect()
    }

    /// Clipped double-Q Bellman targets.
    pub fn targets(&self, b: &Batch, noise: &[f64], cfg: &Td3Config) -> Result<Vec<f64>, QdError> {
        let (_, mut next_a) = actor_actions(&self.actor_spec, &self.target_actor.params, &b.next_states, b.size)?;
        for (a, e) in next_a.iter_mut().zip(noise) {
            *a = (*a + e).clamp(-1.0, 1.0);
        }
        let input = concat_rows(&b.next_states, self.obs_dim(), &next_a, self.act_dim());
        let q1 = self.critic_spec.forward_batch(&self.target_critic1.params, &input, b.size)?;
        let q2 = self.critic_spec.forward_batch(&self.target_critic2.params, &input, b.size)?;
        Ok((0..b.size)
            .map(|i| {
                let not_done = if b.terminals[i] { 0.0 } else { 1.0 };
                cfg.reward_scaling * b.rewards[i] + cfg.discount * not_done * q1.output()[i].min(q2.output()[i])
            })
            .collect())
    }

    /// Mean squared Bellman error of both critics (averaged) on a batch.
    pub fn bellman_loss(&self, b: &Batch, noise: &[f64], cfg: &Td3Config) -> Result<f64, QdError> {
        let y = self.targets(b, noise, cfg)?;
        let input = concat_rows(&b.states, self.obs_dim(), &b.actions, self.act_dim());
        let mut total = 0.0;
        for c in [&self.critic1, &self.critic2] {
            let q = self.critic_spec.forward_batch(&c.params, &input, b.size)?;
            total += q.output().iter().zip(&y).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / b.size as f64;
        }
        Ok(total / 2.0)
    }

    /// Q1 values of `(states, actions)` pairs.
    pub fn q1(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<Vec<f64>, QdError> {
        let input = concat_rows(states, self.obs_dim(), actions, self.act_dim());
        Ok(self.critic_spec.forward_batch(&self.critic1.params, &input, batch)?.output().to_vec())
    }

    fn critic_step<R: Rng + ?Sized>(&mut self, b: &Batch, cfg: &Td3Config, rng: &mut R) -> Result<f64, QdError> {
        let noise = self.smoothing_noise(b.size, cfg, rng);
        let y = self.targets(b, &noise, cfg)?;
        let input = concat_rows(&b.states, self.obs_dim(), &b.actions, self.act_dim());
        let n = b.size as f64;
        let mut loss = 0.0;
        for (critic, opt) in [
            (&mut self.critic1, &mut self.opt_critic1),
            (&mut self.critic2, &mut self.opt_critic2),
        ] {
            let tape = self.critic_spec.forward_batch(&critic.params, &input, b.size)?;
            let up: Vec<f64> = tape.output().iter().zip(&y).map(|(q, y)| 2.0 * (q - y) / n).collect();
            loss += tape.output().iter().zip(&y).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / n;
            let mut grad = vec![0.0; critic.len()];
            self.critic_spec.backward_batch(&critic.params, &tape, &up, &mut grad)?;
            opt.step(critic, &grad)?;
        }
        Ok(loss / 2.0)
    }

    fn actor_step(&mut self, b: &Batch) -> Result<(), QdError> {
        let grad = dpg_gradient(&self.actor_spec, &self.actor.params, &self.critic_spec, &self.critic1.params, &b.states, b.size)?;
        self.opt_actor.step(&mut self.actor, &grad)?;
        Ok(())
    }

    /// `n_steps` TD3 critic updates, with the greedy actor and the target
    /// networks refreshed every `policy_delay` steps. Returns the mean loss.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        n_steps: usize,
        cfg: &Td3Config,
        rng: &mut R,
    ) -> Result<f64, QdError> {
        if buffer.is_empty() {
            return Err(super::buffer::BufferError::Empty.into());
        }
        let mut total = 0.0;
        for _ in 0..n_steps {
            let b = buffer.sample(cfg.batch_size, rng)?;
            total += self.critic_step(&b, cfg, rng)?;
            self.critic_updates += 1;
            if self.critic_updates % cfg.policy_delay.max(1) as u64 == 0 {
                self.actor_step(&b)?;
                soft_update(&mut self.target_critic1, &self.critic1, cfg.tau);
                soft_update(&mut self.target_critic2, &self.critic2, cfg.tau);
                soft_update(&mut self.target_actor, &self.actor, cfg.tau);
            }
        }
        Ok(if n_steps == 0 { 0.0 } else { total / n_steps as f64 })
    }
}

/// Gradient of `-mean_s Q(s, tanh(actor(s)))` with respect to the actor
/// parameters (a descent direction for Adam).
pub fn dpg_gradient(
    actor_spec: &NetSpec,
    actor: &[f64],
    critic_spec: &NetSpec,
    critic: &[f64],
    states: &[f64],
    batch: usize,
) -> Result<Vec<f64>, QdError> {
    let obs = actor_spec.input_dim();
    let act = actor_spec.output_dim();
    let (tape, actions) = actor_actions(actor_spec, actor, states, batch)?;
    let input = concat_rows(states, obs, &actions, act);
    let ctape = critic_spec.forward_batch(critic, &input, batch)?;
    let up = vec![-1.0 / batch as f64; batch];
    let dinput = critic_spec.input_grad_batch(critic, &ctape, &up)?;
    let mut dout = Vec::with_capacity(batch * act);
    for (row, a) in dinput.chunks_exact(obs + act).zip(actions.chunks_exact(act)) {
        for (g, a) in row[obs..].iter().zip(a) {
            dout.push(g * (1.0 - a * a));
        }
    }
    let mut grad = vec![0.0; actor.len()];
    actor_spec.backward_batch(actor, &tape, &dout, &mut grad)?;
    Ok(grad)
}

/// `n_steps` Adam ascent steps of `genotype` on critic 1 over buffer states,
/// with a fresh optimiser per call.
pub fn pg_variation(
    genotype: &Genotype,
    td3: &Td3State,
    buffer: &ReplayBuffer,
    n_steps: usize,
    cfg: &Td3Config,
    seed: u64,
) -> Result<Genotype, QdError> {
    let mut g = genotype.clone();
    if n_steps == 0 {
        return Ok(g);
    }
    g.check(&td3.actor_spec)?;
    let mut r = rng::stream(seed, &[rng::tag::PG]);
    let mut opt = Adam::new(g.len(), cfg.policy_lr);
    for _ in 0..n_steps {
        let states = buffer.sample_states(cfg.batch_size, &mut r)?;
        let grad = dpg_gradient(&td3.actor_spec, &g.params, &td3.critic_spec, &td3.critic1.params, &states, cfg.batch_size)?;
        opt.step(&mut g, &grad)?;
    }
    Ok(g)
}
