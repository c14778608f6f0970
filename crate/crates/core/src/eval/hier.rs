//! Hierarchical composition: a discrete PPO meta-controller that picks a
//! frozen skill and holds it for a fixed number of steps.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::envs::{EnvSpec, Policy, ACTION_DIM};
use crate::nn::{log_softmax, softmax, Activation, Adam, Genotype, NetSpec, OutputHead};
use crate::policy::ConstantPolicy;
use crate::rng::{self, tag, StreamRng};
use crate::skill_rl::RunningNorm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub skill_hold: usize,
    /// Meta decisions collected per PPO iteration.
    pub steps_per_iteration: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 3e-4,
            clip: 0.2,
            gae_lambda: 0.95,
            discount: 0.99,
            epochs: 4,
            minibatch: 64,
            entropy_coef: 0.01,
            skill_hold: 10,
            steps_per_iteration: 2048,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.skill_hold == 0 || self.epochs == 0 || self.minibatch == 0 || self.steps_per_iteration == 0 {
            return Err(EvalError::Config("skill_hold, epochs, minibatch and steps must be positive".into()));
        }
        if !(self.clip > 0.0) || !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.discount) {
            return Err(EvalError::Config("clip must be positive, lambda and discount in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Hand-built hurdle skills: "run" pushes right at full speed, "jump" does
/// the same while holding the jump channel high. Neither alone is optimal.
pub fn run_jump_skills(env: &EnvSpec) -> [ConstantPolicy; 2] {
    let b = env.action_bound;
    [ConstantPolicy { action: [b, 0.0] }, ConstantPolicy { action: [b, b] }]
}

/// Policy and value networks over `normalised obs ++ onehot(last skill)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaController {
    pub policy_spec: NetSpec,
    pub value_spec: NetSpec,
    pub policy: Genotype,
    pub value: Genotype,
    opt_policy: Adam,
    opt_value: Adam,
    pub norm: RunningNorm,
    pub num_skills: usize,
    pub cfg: PpoConfig,
}

impl MetaController {
    pub fn new(obs_dim: usize, num_skills: usize, cfg: &PpoConfig, seed: u64) -> Result<Self, EvalError> {
        cfg.validate()?;
        if num_skills == 0 {
            return Err(EvalError::NoSkills);
        }
        let input = obs_dim + num_skills;
        let policy_spec = NetSpec::mlp(input, &cfg.hidden, num_skills, Activation::Tanh, OutputHead::CategoricalLogits)?;
        let value_spec = NetSpec::mlp(input, &cfg.hidden, 1, Activation::Tanh, OutputHead::Linear)?;
        let mut r = rng::stream(seed, &[tag::INIT, tag::META]);
        let policy = Genotype::random_small_head(&policy_spec, &mut r, 0.01);
        let value = Genotype::random(&value_spec, &mut r);
        Ok(Self {
            opt_policy: Adam::new(policy.len(), cfg.lr),
            opt_value: Adam::new(value.len(), cfg.lr),
            policy_spec,
            value_spec,
            policy,
            value,
            norm: RunningNorm::new(obs_dim),
            num_skills,
            cfg: cfg.clone(),
        })
    }

    fn input(&self, obs: &[f64], last: Option<usize>) -> Vec<f64> {
        let mut x = Vec::with_capacity(obs.len() + self.num_skills);
        self.norm.normalize(obs, &mut x);
        x.extend((0..self.num_skills).map(|k| f64::from(u8::from(Some(k) == last))));
        x
    }

    /// Action probabilities for one observation.
    pub fn probs(&self, obs: &[f64], last: Option<usize>) -> Result<Vec<f64>, EvalError> {
        Ok(softmax(&self.policy_spec.forward(&self.policy.params, &self.input(obs, last))?))
    }
}

/// One meta-level episode.
#[derive(Debug, Clone, Default)]
pub struct MetaEpisode {
    pub inputs: Vec<f64>,
    pub raw_obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Skill executed at every environment step.
    pub executed: Vec<usize>,
    pub fitness: f64,
    pub env_steps: usize,
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Runs one episode, choosing a skill every `skill_hold` steps, either by
/// sampling (`rng` given) or greedily.
pub fn meta_rollout(
    meta: &MetaController,
    skills: &[&dyn Policy],
    env: &EnvSpec,
    env_seed: u64,
    mut rng: Option<&mut StreamRng>,
) -> Result<MetaEpisode, EvalError> {
    let mut ep = MetaEpisode::default();
    let mut state = env.reset(env_seed);
    let mut obs = env.observation(&state);
    let mut last = None;
    let mut action = [0.0; ACTION_DIM];
    let mut t = 0;
    while t < env.horizon {
        let input = meta.input(&obs, last);
        let logits = meta.policy_spec.forward(&meta.policy.params, &input)?;
        let p = softmax(&logits);
        let k = match rng.as_deref_mut() {
            Some(r) => sample_index(&p, r),
            None => (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }),
        };
        ep.log_probs.push(log_softmax(&logits)[k]);
        ep.raw_obs.extend_from_slice(&obs);
        ep.inputs.extend_from_slice(&input);
        ep.actions.push(k);
        let mut reward = 0.0;
        for _ in 0..meta.cfg.skill_hold {
            if t >= env.horizon {
                break;
            }
            skills[k].act(&obs, &mut action);
            let out = env.step(&state, &action)?;
            reward += out.reward;
            ep.executed.push(k);
            state = out.state;
            env.observe(&state, &mut obs);
            t += 1;
            if out.done || out.terminal {
                t = env.horizon;
            }
        }
        ep.rewards.push(reward);
        ep.fitness += reward;
        last = Some(k);
    }
    ep.env_steps = ep.executed.len();
    Ok(ep)
}

/// A point of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    /// Mean fitness of the sampled training episodes.
    pub mean_fitness: f64,
    /// Fitness of a greedy episode after the update.
    pub greedy_fitness: f64,
}

/// GAE advantages and returns of one episode, which ends at the horizon.
fn gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + discount * next - values[t];
        acc = delta + discount * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

impl MetaController {
    /// One PPO update on the collected episodes.
    fn update(&mut self, episodes: &[MetaEpisode], rng: &mut StreamRng) -> Result<(), EvalError> {
        let width = self.policy_spec.input_dim();
        let mut inputs = Vec::new();
        let mut actions = Vec::new();
        let mut old_lp = Vec::new();
        let mut advs = Vec::new();
        let mut rets = Vec::new();
        for ep in episodes {
            let n = ep.actions.len();
            let v = self.value_spec.forward_batch(&self.value.params, &ep.inputs, n)?.output().to_vec();
            let (a, r) = gae(&ep.rewards, &v, self.cfg.discount, self.cfg.gae_lambda);
            inputs.extend_from_slice(&ep.inputs);
            actions.extend_from_slice(&ep.actions);
            old_lp.extend_from_slice(&ep.log_probs);
            advs.extend(a);
            rets.extend(r);
        }
        let total = actions.len();
        let k = self.num_skills;
        let mut order: Vec<usize> = (0..total).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(rng);
            for mb in order.chunks(self.cfg.minibatch) {
                let b = mb.len();
                let x: Vec<f64> = mb.iter().flat_map(|&i| inputs[i * width..(i + 1) * width].iter().copied()).collect();
                let a_mb: Vec<f64> = mb.iter().map(|&i| advs[i]).collect();
                let mean = a_mb.iter().sum::<f64>() / b as f64;
                let std = (a_mb.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / b as f64).sqrt().max(1e-8);

                let tape = self.policy_spec.forward_batch(&self.policy.params, &x, b)?;
                let mut up = vec![0.0; b * k];
                for (row, (&i, adv_raw)) in mb.iter().zip(&a_mb).enumerate() {
                    let adv = if b > 1 { (adv_raw - mean) / std } else { *adv_raw };
                    let logits = &tape.output()[row * k..(row + 1) * k];
                    let lp = log_softmax(logits);
                    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                    let ratio = (lp[actions[i]] - old_lp[i]).exp();
                    let clipped = (adv > 0.0 && ratio > 1.0 + self.cfg.clip) || (adv < 0.0 && ratio < 1.0 - self.cfg.clip);
                    let entropy: f64 = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
                    let g = &mut up[row * k..(row + 1) * k];
                    for j in 0..k {
                        let onehot = if j == actions[i] { 1.0 } else { 0.0 };
                        let surrogate = if clipped { 0.0 } else { -adv * ratio * (onehot - p[j]) };
                        let ent = self.cfg.entropy_coef * p[j] * (lp[j] + entropy);
                        g[j] = (surrogate + ent) / b as f64;
                    }
                }
                let mut grad = vec![0.0; self.policy.len()];
                self.policy_spec.backward_batch(&self.policy.params, &tape, &up, &mut grad)?;
                self.opt_policy.step(&mut self.policy, &grad)?;

                let vt = self.value_spec.forward_batch(&self.value.params, &x, b)?;
                let vup: Vec<f64> =
                    mb.iter().zip(vt.output()).map(|(&i, v)| 2.0 * (v - rets[i]) / b as f64).collect();
                let mut vgrad = vec![0.0; self.value.len()];
                self.value_spec.backward_batch(&self.value.params, &vt, &vup, &mut vgrad)?;
                self.opt_value.step(&mut self.value, &vgrad)?;
            }
        }
        Ok(())
    }
}

/// Trains a meta-controller over frozen `skills` until `budget_env_steps`
/// environment steps have been spent. Returns the controller and its
/// learning curve.
pub fn hierarchical_train(
    skills: &[&dyn Policy],
    env: &EnvSpec,
    cfg: &PpoConfig,
    budget_env_steps: u64,
    seed: u64,
) -> Result<(MetaController, Vec<CurvePoint>), EvalError> {
    if skills.is_empty() {
        return Err(EvalError::NoSkills);
    }
    let mut meta = MetaController::new(env.obs_dim(), skills.len(), cfg, seed)?;
    let per_episode = env.horizon.div_ceil(cfg.skill_hold);
    let episodes_per_iter = cfg.steps_per_iteration.div_ceil(per_episode).max(1);
    let mut curve = Vec::new();
    let mut env_steps = 0u64;
    let mut episode_index = 0u64;
    let mut iteration = 0u64;
    while env_steps < budget_env_steps {
        let episodes: Vec<MetaEpisode> = (0..episodes_per_iter as u64)
            .into_par_iter()
            .map(|i| {
                let index = episode_index + i;
                let mut r = rng::stream(seed, &[tag::META, tag::ACTION, index]);
                meta_rollout(&meta, skills, env, rng::derive_seed(seed, &[tag::META, tag::EVAL, index]), Some(&mut r))
            })
            .collect::<Result<_, _>>()?;
        episode_index += episodes_per_iter as u64;
        env_steps += episodes.iter().map(|e| e.env_steps as u64).sum::<u64>();
        let mean_fitness = episodes.iter().map(|e| e.fitness).sum::<f64>() / episodes.len() as f64;

        // Inputs were built with the normaliser in force during collection;
        // refresh it only after the update so that they stay consistent.
        let mut r = rng::stream(seed, &[tag::META, tag::LEARNER, iteration]);
        meta.update(&episodes, &mut r)?;
        for ep in &episodes {
            for o in ep.raw_obs.chunks_exact(env.obs_dim()) {
                meta.norm.update(o);
            }
        }
        let greedy = meta_rollout(&meta, skills, env, rng::derive_seed(seed, &[tag::META, u64::MAX]), None)?;
        curve.push(CurvePoint { env_steps, mean_fitness, greedy_fitness: greedy.fitness });
        iteration += 1;
    }
    Ok((meta, curve))
}
