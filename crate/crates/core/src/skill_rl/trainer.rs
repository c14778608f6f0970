//! Data collection and the learner schedule for skill discovery.

use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::models::{Discriminator, SkillDynamics};
use super::sac::{shaped_rewards, FeatureMap, IntrinsicModel, SacConfig, SacState, SacStats};
use super::{feature_dim, ShapingConfig, ShapingMode, SkillError, SkillSet};
use crate::envs::{self, EnvSpec, Policy, Trajectory, ACTION_DIM};
use crate::nn::{self, Activation, Genotype, NetSpec, OutputHead};
use crate::policy::{forward_with, DeterministicPolicy};
use crate::qd::ReplayBuffer;
use crate::repertoire::{self, CvtRepertoire};
use crate::rng::{self, tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkillMethod {
    Diayn,
    Dads,
    /// Plain SAC without a diversity model.
    Sac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub method: SkillMethod,
    pub num_skills: usize,
    pub use_prior: bool,
    pub env_batch: usize,
    pub sac: SacConfig,
    pub model_hidden: Vec<usize>,
    pub model_lr: f64,
    pub dynamics_components: usize,
    pub shaping: ShapingConfig,
    /// Environment steps between passive-repertoire recordings.
    pub record_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: SkillMethod::Diayn,
            num_skills: 5,
            use_prior: true,
            env_batch: 200,
            sac: SacConfig::default(),
            model_hidden: vec![64, 64],
            model_lr: 3e-4,
            dynamics_components: 4,
            shaping: ShapingConfig::default(),
            record_every: 100_000,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), SkillError> {
        self.sac.validate()?;
        self.shaping.validate()?;
        let min_skills = if self.method == SkillMethod::Sac { 1 } else { 2 };
        if self.num_skills < min_skills {
            return Err(SkillError::Config(format!(
                "{:?} needs at least {min_skills} skills, got {}",
                self.method, self.num_skills
            )));
        }
        if self.env_batch == 0 || self.dynamics_components == 0 {
            return Err(SkillError::Config("env_batch and dynamics_components must be positive".into()));
        }
        if self.method == SkillMethod::Sac && self.shaping.mode != ShapingMode::None {
            return Err(SkillError::Config("plain SAC has no diversity reward to shape".into()));
        }
        Ok(())
    }
}

/// Skill-conditioned policy sampling `tanh(mu + sigma * eps)` with its own
/// random stream; used for training rollouts.
pub struct StochasticSkillPolicy<'a> {
    pub set: &'a SkillSet,
    pub skill: usize,
    pub bound: f64,
    rng: Mutex<StreamRng>,
}

impl<'a> StochasticSkillPolicy<'a> {
    pub fn new(set: &'a SkillSet, skill: usize, bound: f64, rng: StreamRng) -> Self {
        Self { set, skill, bound, rng: Mutex::new(rng) }
    }
}

impl Policy for StochasticSkillPolicy<'_> {
    fn act(&self, obs: &[f64], action: &mut [f64]) {
        let mut input = Vec::with_capacity(obs.len() + self.set.num_skills);
        input.extend_from_slice(obs);
        input.extend((0..self.set.num_skills).map(|z| f64::from(u8::from(z == self.skill))));
        let mut rng = self.rng.lock().expect("rollout rng is never poisoned");
        forward_with(&self.set.spec, &self.set.policy.params, &input, |out| {
            let (mu, log_std) = nn::gaussian_head(out);
            for ((a, m), ls) in action.iter_mut().zip(mu).zip(&log_std) {
                let e: f64 = rng.sample(StandardNormal);
                *a = self.bound * nn::tanh(m + ls.exp() * e);
            }
        })
    }
}

/// One training episode and the skill it was generated with.
#[derive(Debug, Clone)]
pub struct SkillEpisode {
    pub skill: u32,
    pub trajectory: Trajectory,
}

/// Samples `z` uniformly for episode `index` of a run.
pub fn episode_skill(seed: u64, index: u64, num_skills: usize) -> u32 {
    rng::stream(seed, &[tag::SKILL, index]).random_range(0..num_skills as u32)
}

/// `count` stochastic episodes, numbered from `first_index`, each with one
/// skill drawn from the prior.
pub fn skill_rollout_batch(
    set: &SkillSet,
    env: &EnvSpec,
    count: usize,
    seed: u64,
    first_index: u64,
) -> Result<Vec<SkillEpisode>, SkillError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let index = first_index + i;
            let skill = episode_skill(seed, index, set.num_skills);
            let policy =
                StochasticSkillPolicy::new(set, skill as usize, env.action_bound, rng::stream(seed, &[tag::ACTION, index]));
            let trajectory = envs::rollout(&policy, env, rng::derive_seed(seed, &[tag::EVAL, index]))?;
            Ok(SkillEpisode { skill, trajectory })
        })
        .collect()
}

/// Folds skill `z` of a squashed-gaussian policy into a plain deterministic
/// network `obs -> hidden -> action` whose output is the skill's mean.
pub fn fold_skill(set: &SkillSet, z: usize) -> Result<(NetSpec, Genotype), SkillError> {
    let sizes = set.spec.layer_sizes();
    let obs = sizes[0] - set.num_skills;
    let hidden = &sizes[1..sizes.len() - 1];
    let spec = NetSpec::mlp(obs, hidden, ACTION_DIM, Activation::Tanh, OutputHead::Linear)?;
    let src = &set.policy.params;
    let mut params = Vec::with_capacity(spec.param_count());
    let mut offset = 0;
    let layers = sizes.len() - 1;
    for l in 0..layers {
        let (nin, nout) = (sizes[l], sizes[l + 1]);
        let keep_in = if l == 0 { obs } else { nin };
        let keep_out = if l + 1 == layers { ACTION_DIM } else { nout };
        for i in 0..keep_in {
            params.extend_from_slice(&src[offset + i * nout..offset + i * nout + keep_out]);
        }
        let bias = offset + nin * nout;
        for o in 0..keep_out {
            let extra = if l == 0 { src[offset + (obs + z) * nout + o] } else { 0.0 };
            params.push(src[bias + o] + extra);
        }
        offset += nin * nout + nout;
    }
    let mut g = Genotype { params, spec_hash: spec.hash() };
    g.quantize();
    Ok((spec, g))
}

/// One passive-repertoire evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedEval {
    pub env_steps: u64,
    pub skill: usize,
    pub fitness: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationStats {
    pub episodes: usize,
    pub learner_steps: usize,
    pub mean_episode_return: f64,
    pub sac: SacStats,
    pub model_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SkillTrainer {
    pub env: EnvSpec,
    pub cfg: TrainerConfig,
    pub seed: u64,
    pub sac: SacState,
    pub discriminator: Option<Discriminator>,
    pub dynamics: Option<SkillDynamics>,
    pub buffer: ReplayBuffer,
    pub passive: CvtRepertoire,
    pub records: Vec<RecordedEval>,
    pub iteration: u64,
    pub episodes: u64,
    pub env_steps: u64,
}

/// Serialisable form of everything except the passive repertoire, which has
/// its own byte format.
#[derive(Serialize, Deserialize)]
struct Snapshot {
    env: EnvSpec,
    cfg: TrainerConfig,
    seed: u64,
    sac: SacState,
    discriminator: Option<Discriminator>,
    dynamics: Option<SkillDynamics>,
    buffer: ReplayBuffer,
    records: Vec<RecordedEval>,
    iteration: u64,
    episodes: u64,
    env_steps: u64,
    passive: Vec<u8>,
}

impl SkillTrainer {
    pub fn new(env: &EnvSpec, cfg: &TrainerConfig, template: &CvtRepertoire, seed: u64) -> Result<Self, SkillError> {
        cfg.validate()?;
        env.validate()?;
        let obs = env.obs_dim();
        let sac = SacState::new(obs, cfg.num_skills, &cfg.sac, seed)?;
        let fdim = feature_dim(env, cfg.use_prior);
        let mut r = rng::stream(seed, &[tag::INIT, tag::SKILL]);
        let (discriminator, dynamics) = match cfg.method {
            SkillMethod::Diayn => (
                Some(Discriminator::new(fdim, cfg.num_skills, &cfg.model_hidden, cfg.model_lr, &mut r)?),
                None,
            ),
            SkillMethod::Dads => (
                None,
                Some(SkillDynamics::new(
                    fdim,
                    cfg.num_skills,
                    cfg.dynamics_components,
                    &cfg.model_hidden,
                    cfg.model_lr,
                    &mut r,
                )?),
            ),
            SkillMethod::Sac => (None, None),
        };
        Ok(Self {
            env: env.clone(),
            cfg: cfg.clone(),
            seed,
            sac,
            discriminator,
            dynamics,
            buffer: ReplayBuffer::new(cfg.sac.buffer_capacity, obs, ACTION_DIM),
            passive: template.empty_like(),
            records: Vec::new(),
            iteration: 0,
            episodes: 0,
            env_steps: 0,
        })
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap { kind: self.env.kind, use_prior: self.cfg.use_prior, obs_dim: self.env.obs_dim() }
    }

    pub fn model(&self) -> IntrinsicModel<'_> {
        match (&self.discriminator, &self.dynamics) {
            (Some(d), _) => IntrinsicModel::Diayn(d),
            (_, Some(m)) => IntrinsicModel::Dads(m),
            _ => IntrinsicModel::None,
        }
    }

    pub fn skill_set(&self) -> Result<SkillSet, SkillError> {
        self.sac.skill_set()
    }

    /// Deterministic per-skill networks of the current policy.
    pub fn folded_skills(&self) -> Result<Vec<(NetSpec, Genotype)>, SkillError> {
        let set = self.skill_set()?;
        (0..set.num_skills).map(|z| fold_skill(&set, z)).collect()
    }

    /// Collects one batch of episodes, then runs one learner step per
    /// `env_batch` new transitions. Records into the passive repertoire each
    /// time a multiple of `record_every` is crossed.
    pub fn iteration(&mut self) -> Result<IterationStats, SkillError> {
        let set = self.skill_set()?;
        let episodes = skill_rollout_batch(&set, &self.env, self.cfg.env_batch, self.seed, self.episodes)?;
        let mut transitions = 0;
        let mut ret = 0.0;
        for ep in &episodes {
            self.buffer.push_trajectory(&ep.trajectory, self.env.action_bound, ep.skill)?;
            transitions += ep.trajectory.transitions.len();
            ret += ep.trajectory.fitness;
        }
        self.episodes += episodes.len() as u64;
        let before = self.env_steps;
        self.env_steps += transitions as u64;

        let learner_steps = transitions.div_ceil(self.cfg.env_batch);
        let mut stats = IterationStats {
            episodes: episodes.len(),
            learner_steps,
            mean_episode_return: ret / episodes.len().max(1) as f64,
            ..Default::default()
        };
        let map = self.feature_map();
        let mut r = rng::stream(self.seed, &[tag::LEARNER, self.iteration]);
        for _ in 0..learner_steps {
            let batch = self.buffer.sample(self.cfg.sac.batch_size, &mut r)?;
            if let Some(d) = &mut self.discriminator {
                stats.model_loss = d.train_step(&map.features(&batch.next_states), &batch.skills)?;
            }
            if let Some(m) = &mut self.dynamics {
                stats.model_loss = m.train_step(&map.deltas(&batch.states, &batch.next_states), &batch.skills)?;
            }
            let rewards = shaped_rewards(self.model(), &batch, &map, &self.cfg.shaping)?;
            stats.sac = self.sac.update(&batch, &rewards, &self.cfg.sac, &mut r)?;
        }
        self.iteration += 1;

        if self.cfg.record_every > 0 {
            let due = self.env_steps / self.cfg.record_every - before / self.cfg.record_every;
            for _ in 0..due {
                self.record()?;
            }
        }
        Ok(stats)
    }

    /// Evaluates every skill's mean policy once and inserts it into the
    /// passive repertoire.
    pub fn record(&mut self) -> Result<usize, SkillError> {
        let folded = self.folded_skills()?;
        let bound = self.env.action_bound;
        let call = self.records.len() as u64;
        let eval_seed = rng::derive_seed(self.seed, &[tag::EVAL, u64::MAX, call]);
        let skills: Vec<(DeterministicPolicy<'_>, Genotype)> =
            folded.iter().map(|(s, g)| (DeterministicPolicy::new(s, g, bound), g.clone())).collect();
        for (z, (policy, _)) in skills.iter().enumerate() {
            let eval = envs::evaluate(policy, &self.env, rng::derive_seed(eval_seed, &[z as u64]))?;
            self.records.push(RecordedEval {
                env_steps: self.env_steps,
                skill: z,
                fitness: eval.fitness,
                descriptor: eval.descriptor,
            });
        }
        Ok(repertoire::passive_record(&mut self.passive, &skills, &self.env, eval_seed)?)
    }

    /// Trains until `total_env_steps` transitions have been collected.
    pub fn train(
        &mut self,
        total_env_steps: u64,
        mut on_iteration: impl FnMut(&Self, &IterationStats),
    ) -> Result<(), SkillError> {
        while self.env_steps < total_env_steps {
            let stats = self.iteration()?;
            on_iteration(self, &stats);
        }
        Ok(())
    }

    /// Best fitness over all recorded evaluations.
    pub fn best_recorded_return(&self) -> Option<f64> {
        self.records.iter().map(|r| r.fitness).reduce(f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let snap = Snapshot {
            env: self.env.clone(),
            cfg: self.cfg.clone(),
            seed: self.seed,
            sac: self.sac.clone(),
            discriminator: self.discriminator.clone(),
            dynamics: self.dynamics.clone(),
            buffer: self.buffer.clone(),
            records: self.records.clone(),
            iteration: self.iteration,
            episodes: self.episodes,
            env_steps: self.env_steps,
            passive: self.passive.to_bytes(),
        };
        bincode::serialize(&snap).expect("in-memory serialisation cannot fail")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SkillError> {
        let snap: Snapshot =
            bincode::deserialize(bytes).map_err(|e| SkillError::Config(format!("corrupt trainer checkpoint: {e}")))?;
        Ok(Self {
            passive: CvtRepertoire::from_bytes(&snap.passive)?,
            env: snap.env,
            cfg: snap.cfg,
            seed: snap.seed,
            sac: snap.sac,
            discriminator: snap.discriminator,
            dynamics: snap.dynamics,
            buffer: snap.buffer,
            records: snap.records,
            iteration: snap.iteration,
            episodes: snap.episodes,
            env_steps: snap.env_steps,
        })
    }
}

/// Estimates the SMERL target: trains plain SAC once per seed and returns
/// the median over seeds of the best recorded return, with the per-seed
/// values.
pub fn smerl_target(
    env: &EnvSpec,
    cfg: &TrainerConfig,
    template: &CvtRepertoire,
    seeds: &[u64],
    total_env_steps: u64,
) -> Result<(f64, Vec<f64>), SkillError> {
    let plain = TrainerConfig {
        method: SkillMethod::Sac,
        num_skills: 1,
        shaping: ShapingConfig { mode: ShapingMode::None, ..cfg.shaping },
        ..cfg.clone()
    };
    let mut best = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut t = SkillTrainer::new(env, &plain, template, seed)?;
        t.train(total_env_steps, |_, _| {})?;
        if t.records.is_empty() {
            t.record()?;
        }
        best.push(t.best_recorded_return().expect("at least one recording"));
    }
    let mut sorted = best.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Ok((median, best))
}
