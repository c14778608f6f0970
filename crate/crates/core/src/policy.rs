//! Network-backed policies shared by the QD and RL learners.
//!
//! Every learner works with actions normalised to `[-1, 1]`; the environment
//! receives `action_bound * a`.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Policy, ACTION_DIM};
use crate::nn::{self, Activation, Genotype, NetSpec, NnError, OutputHead, Scratch};

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Runs `spec` on `input` with a per-thread scratch buffer.
pub fn forward_with<R>(spec: &NetSpec, params: &[f64], input: &[f64], f: impl FnOnce(&[f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        f(spec.forward_unchecked(params, input, &mut s))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

/// Deterministic policy topology: `obs -> hidden (tanh) -> action` with a
/// tanh applied to the output outside the network.
pub fn deterministic_spec(env: &EnvSpec, cfg: &NetConfig) -> Result<NetSpec, NnError> {
    NetSpec::mlp(
        env.obs_dim(),
        &cfg.hidden,
        ACTION_DIM,
        Activation::Tanh,
        OutputHead::Linear,
    )
}

/// A genotype evaluated as `bound * tanh(net(obs))`.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicPolicy<'a> {
    pub spec: &'a NetSpec,
    pub params: &'a [f64],
    pub bound: f64,
}

impl<'a> DeterministicPolicy<'a> {
    pub fn new(spec: &'a NetSpec, genotype: &'a Genotype, bound: f64) -> Self {
        Self {
            spec,
            params: &genotype.params,
            bound,
        }
    }
}

impl Policy for DeterministicPolicy<'_> {
    fn act(&self, obs: &[f64], action: &mut [f64]) {
        forward_with(self.spec, self.params, obs, |out| {
            for (a, o) in action.iter_mut().zip(out) {
                *a = self.bound * nn::tanh(*o);
            }
        })
    }
}

/// Emits the same action at every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantPolicy {
    pub action: [f64; ACTION_DIM],
}

impl Policy for ConstantPolicy {
    fn act(&self, _obs: &[f64], action: &mut [f64]) {
        action.copy_from_slice(&self.action);
    }
}

/// Skill-conditioned policy evaluated on `obs ++ onehot(skill)` with the
/// squashed-gaussian mean as the action (no sampling).
#[derive(Debug, Clone, Copy)]
pub struct SkillPolicy<'a> {
    pub spec: &'a NetSpec,
    pub params: &'a [f64],
    pub bound: f64,
    pub skill: usize,
    pub num_skills: usize,
}

impl Policy for SkillPolicy<'_> {
    fn act(&self, obs: &[f64], action: &mut [f64]) {
        let mut input = [0.0; 32];
        let n = obs.len() + self.num_skills;
        let input = if n <= input.len() {
            input[..obs.len()].copy_from_slice(obs);
            input[obs.len() + self.skill] = 1.0;
            &input[..n]
        } else {
            // Rare wide inputs take the allocating path.
            return self.act_alloc(obs, action);
        };
        forward_with(self.spec, self.params, input, |out| {
            for (a, m) in action.iter_mut().zip(&out[..ACTION_DIM]) {
                *a = self.bound * nn::tanh(*m);
            }
        })
    }
}

impl SkillPolicy<'_> {
    fn act_alloc(&self, obs: &[f64], action: &mut [f64]) {
        let mut input = obs.to_vec();
        input.extend((0..self.num_skills).map(|z| f64::from(u8::from(z == self.skill))));
        forward_with(self.spec, self.params, &input, |out| {
            for (a, m) in action.iter_mut().zip(&out[..ACTION_DIM]) {
                *a = self.bound * nn::tanh(*m);
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_policy_is_bounded() {
        let env = EnvSpec::shipped(EnvKind::PointOmni);
        let spec = deterministic_spec(&env, &NetConfig::default()).unwrap();
        let mut g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        for p in &mut g.params {
            *p *= 50.0;
        }
        let pol = DeterministicPolicy::new(&spec, &g, env.action_bound);
        let mut a = [0.0; 2];
        pol.act(&[0.3, -0.2], &mut a);
        assert!(a.iter().all(|v| v.abs() <= env.action_bound));
    }

    #[test]
    fn skill_policy_paths_agree() {
        let spec = NetSpec::mlp(3 + 40, &[8], 4, Activation::Tanh, OutputHead::TanhSquashedGaussian).unwrap();
        let g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let pol = SkillPolicy {
            spec: &spec,
            params: &g.params,
            bound: 0.1,
            skill: 7,
            num_skills: 40,
        };
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        pol.act(&[0.1, 0.2, 0.3], &mut a);
        pol.act_alloc(&[0.1, 0.2, 0.3], &mut b);
        assert_eq!(a, b);
    }
}
