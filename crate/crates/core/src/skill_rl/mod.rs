//! Mutual-information skill discovery: SAC over skill-conditioned policies,
//! DIAYN discriminators, DADS skill-dynamics models, intrinsic rewards and
//! the two ways of mixing them with the task reward.

pub mod models;
pub mod sac;
pub mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use models::{Discriminator, RunningNorm, SkillDynamics};
pub use sac::SacState;
pub use trainer::{smerl_target, SkillMethod, SkillTrainer, TrainerConfig};

use crate::envs::{EnvError, EnvKind, EnvSpec, ACTION_DIM};
use crate::nn::{Activation, Genotype, NetSpec, NnError, OutputHead};
use crate::policy::SkillPolicy;
use crate::qd::BufferError;
use crate::repertoire::RepertoireError;

#[derive(Debug, Error)]
pub enum SkillError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Repertoire(#[from] RepertoireError),
    #[error("invalid skill configuration: {0}")]
    Config(String),
}

/// Probability floor applied before taking discriminator logs.
pub const PROB_FLOOR: f64 = 1e-6;
/// Density floor applied to skill-dynamics likelihoods.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// `log q(z|s) - log p(z)` for a uniform prior over `num_skills` skills.
pub fn diayn_reward(q_z: f64, num_skills: usize) -> f64 {
    q_z.max(PROB_FLOOR).ln() + (num_skills as f64).ln()
}

/// `log q(ds|z) - log (1/|Z| sum_z' q(ds|z'))` from the per-skill log
/// densities of one transition.
pub fn dads_reward(log_densities: &[f64], z: usize) -> f64 {
    let floor = DENSITY_FLOOR.ln();
    let l: Vec<f64> = log_densities.iter().map(|v| v.max(floor)).collect();
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let marginal = max + (l.iter().map(|v| (v - max).exp()).sum::<f64>() / l.len() as f64).ln();
    l[z] - marginal
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapingMode {
    /// `r_env + beta * r_div` on every transition.
    Sum,
    /// Diversity reward only on transitions of near-optimal episodes.
    SmerlGate,
    /// Task reward only.
    None,
    /// Diversity reward only (unsupervised discovery).
    Intrinsic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingConfig {
    pub mode: ShapingMode,
    pub beta: f64,
    pub target_return: f64,
    pub epsilon: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            mode: ShapingMode::Sum,
            beta: 2.0,
            target_return: 0.0,
            epsilon: 0.0,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<(), SkillError> {
        if !(self.beta >= 0.0) || !(self.epsilon >= 0.0) || !self.target_return.is_finite() {
            return Err(SkillError::Config(format!(
                "beta and epsilon must be non-negative and the target finite, got {self:?}"
            )));
        }
        Ok(())
    }

    /// True when the diversity term applies to a transition.
    pub fn gate(&self, episode_return: f64) -> bool {
        match self.mode {
            ShapingMode::Sum => true,
            ShapingMode::SmerlGate => episode_return >= self.target_return - self.epsilon,
            ShapingMode::None => false,
            ShapingMode::Intrinsic => true,
        }
    }
}

pub fn shape_reward(r_env: f64, r_div: f64, cfg: &ShapingConfig, episode_return: f64) -> f64 {
    if cfg.mode == ShapingMode::Intrinsic {
        r_div
    } else if cfg.gate(episode_return) {
        r_env + cfg.beta * r_div
    } else {
        r_env
    }
}

/// Default diversity scale per environment: 3 for the maze, 4 for the
/// energy-penalised omni task, 2 elsewhere.
pub fn default_beta(kind: EnvKind) -> f64 {
    match kind {
        EnvKind::PointMaze => 3.0,
        EnvKind::PointOmni => 4.0,
        _ => 2.0,
    }
}

/// Inputs of the discriminator and skill-dynamics model: the `(x, y)` slice
/// when the environment supports the positional prior, the full observation
/// otherwise.
pub fn descriptor_prior_features(state: &[f64], kind: EnvKind, use_prior: bool) -> Vec<f64> {
    if use_prior && kind.has_position_prior() {
        state[..2].to_vec()
    } else {
        state.to_vec()
    }
}

pub fn feature_dim(env: &EnvSpec, use_prior: bool) -> usize {
    if use_prior && env.kind.has_position_prior() {
        2
    } else {
        env.obs_dim()
    }
}

/// A latent-conditioned policy with a uniform skill prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSet {
    pub spec: NetSpec,
    pub policy: Genotype,
    pub num_skills: usize,
    pub prior: Vec<f64>,
}

impl SkillSet {
    /// Policy topology over `obs ++ onehot(z)` with a squashed-gaussian head.
    pub fn policy_spec(obs_dim: usize, num_skills: usize, hidden: &[usize]) -> Result<NetSpec, NnError> {
        NetSpec::mlp(
            obs_dim + num_skills,
            hidden,
            2 * ACTION_DIM,
            Activation::Tanh,
            OutputHead::TanhSquashedGaussian,
        )
    }

    pub fn new(spec: NetSpec, policy: Genotype, num_skills: usize) -> Result<Self, SkillError> {
        if num_skills == 0 {
            return Err(SkillError::Config("need at least one skill".into()));
        }
        policy.check(&spec)?;
        Ok(Self {
            spec,
            policy,
            num_skills,
            prior: vec![1.0 / num_skills as f64; num_skills],
        })
    }

    /// The deterministic (mean-action) policy of skill `z`.
    pub fn skill(&self, z: usize, bound: f64) -> SkillPolicy<'_> {
        SkillPolicy {
            spec: &self.spec,
            params: &self.policy.params,
            bound,
            skill: z,
            num_skills: self.num_skills,
        }
    }
}

/// Appends `onehot(z)` to every row of `states`.
pub fn augment(states: &[f64], obs_dim: usize, skills: &[u32], num_skills: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(skills.len() * (obs_dim + num_skills));
    for (row, &z) in states.chunks_exact(obs_dim).zip(skills) {
        out.extend_from_slice(row);
        out.extend((0..num_skills).map(|k| f64::from(u8::from(k == z as usize))));
    }
    out
}
