//! Quality-diversity training loops: MAP-Elites, PGA-MAP-Elites, AURORA and
//! PGA-AURORA.
//!
//! Every loop derives its random streams from `(seed, iteration, purpose,
//! candidate)`, so a run can be resumed from any iteration boundary and the
//! number of worker threads never changes a result.

pub mod aurora;
pub mod buffer;
pub mod td3;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aurora::{aurora_init, aurora_iteration, Autoencoder, AuroraConfig, AuroraState, AuroraVariation};
pub use buffer::{Batch, BufferError, ReplayBuffer};
pub use td3::{concat_rows, pg_variation, Td3Config, Td3State};

use crate::envs::{self, EnvError, EnvSpec, Evaluation, Trajectory};
use crate::nn::{Genotype, NetSpec, NnError};
use crate::policy::DeterministicPolicy;
use crate::repertoire::{CvtRepertoire, RepertoireError};
use crate::rng::{self, tag};
use crate::variation::{self, VariationConfig, VariationError};

#[derive(Debug, Error)]
pub enum QdError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Repertoire(#[from] RepertoireError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Variation(#[from] VariationError),
}

/// Genetic loop settings shared by MAP-Elites and AURORA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub batch_size: usize,
    pub init_batch: usize,
    pub sigma_iso: f64,
    pub sigma_line: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            init_batch: 1000,
            sigma_iso: 0.005,
            sigma_line: 0.05,
        }
    }
}

/// Settings of the policy-gradient assisted loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgaConfig {
    pub batch_size: usize,
    pub init_batch: usize,
    pub sigma_iso: f64,
    pub sigma_line: f64,
    pub pg_proportion: f64,
    pub td3: Td3Config,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            init_batch: 100,
            sigma_iso: 0.005,
            sigma_line: 0.05,
            pg_proportion: 0.5,
            td3: Td3Config::default(),
        }
    }
}

impl GaConfig {
    pub fn variation(&self) -> VariationConfig {
        VariationConfig {
            sigma_iso: self.sigma_iso,
            sigma_line: self.sigma_line,
            batch_size: self.batch_size,
        }
    }
}

impl PgaConfig {
    pub fn variation(&self) -> VariationConfig {
        VariationConfig {
            sigma_iso: self.sigma_iso,
            sigma_line: self.sigma_line,
            batch_size: self.batch_size,
        }
    }

    /// Number of policy-gradient children in a batch of `n`.
    pub fn pg_count(&self, n: usize) -> usize {
        ((n as f64 * self.pg_proportion).round() as usize).min(n)
    }
}

/// A CVT repertoire with loop counters.
#[derive(Debug, Clone)]
pub struct CvtState {
    pub rep: CvtRepertoire,
    pub iteration: u64,
    pub env_steps: u64,
}

/// Critics and replay buffer of the policy-gradient loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgaLearner {
    pub td3: Td3State,
    pub buffer: ReplayBuffer,
}

impl PgaLearner {
    pub fn new(env: &EnvSpec, spec: &NetSpec, cfg: &Td3Config, seed: u64) -> Result<Self, QdError> {
        Ok(Self {
            td3: Td3State::new(spec.clone(), cfg, seed)?,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, env.obs_dim(), env.action_dim()),
        })
    }

    /// Appends the trajectories in order.
    pub fn record(&mut self, trajs: &[Trajectory], bound: f64) -> Result<(), QdError> {
        for t in trajs {
            self.buffer.push_trajectory(t, bound, 0)?;
        }
        Ok(())
    }
}

/// Seed of the `index`-th evaluation of `iteration`.
pub fn eval_seed(seed: u64, iteration: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[tag::EVAL, iteration, index as u64])
}

/// Evaluates genotypes in parallel, results in input order.
pub fn evaluate_all(
    genotypes: &[Genotype],
    env: &EnvSpec,
    spec: &NetSpec,
    seed: u64,
    iteration: u64,
) -> Result<Vec<Evaluation>, QdError> {
    genotypes
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let pol = DeterministicPolicy::new(spec, g, env.action_bound);
            Ok(envs::evaluate(&pol, env, eval_seed(seed, iteration, i))?)
        })
        .collect()
}

/// Like [`evaluate_all`] but keeps every transition.
pub fn rollout_all(
    genotypes: &[Genotype],
    env: &EnvSpec,
    spec: &NetSpec,
    seed: u64,
    iteration: u64,
) -> Result<Vec<Trajectory>, QdError> {
    genotypes
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let pol = DeterministicPolicy::new(spec, g, env.action_bound);
            Ok(envs::rollout(&pol, env, eval_seed(seed, iteration, i))?)
        })
        .collect()
}

/// The initial population: `count` independently initialised genotypes.
pub fn initial_population(spec: &NetSpec, count: usize, seed: u64) -> Vec<Genotype> {
    (0..count)
        .map(|i| Genotype::random(spec, &mut rng::stream(seed, &[tag::INIT, i as u64])))
        .collect()
}

/// `n` Iso+LineDD children of parents drawn uniformly from `pool`.
pub fn ga_children(
    pool: &[Genotype],
    n: usize,
    cfg: &VariationConfig,
    seed: u64,
    iteration: u64,
) -> Result<Vec<Genotype>, QdError> {
    let mut r = rng::stream(seed, &[tag::SELECT, iteration]);
    let x1 = variation::select_from(pool, n, &mut r)?;
    let x2 = variation::select_from(pool, n, &mut r)?;
    x1.par_iter()
        .zip(x2.par_iter())
        .enumerate()
        .map(|(i, (a, b))| {
            let mut r = rng::stream(seed, &[tag::VARIATION, iteration, i as u64]);
            Ok(variation::iso_line_dd(a, b, cfg, &mut r)?)
        })
        .collect()
}

/// A batch of `n` children: the first `pg_count(n)` from the
/// policy-gradient operator, the rest from Iso+LineDD.
pub fn pga_children(
    pool: &[Genotype],
    n: usize,
    cfg: &PgaConfig,
    learner: &PgaLearner,
    seed: u64,
    iteration: u64,
) -> Result<Vec<Genotype>, QdError> {
    let n_pg = cfg.pg_count(n);
    let mut r = rng::stream(seed, &[tag::SELECT, iteration, tag::PG]);
    let pg_parents = variation::select_from(pool, n_pg, &mut r)?;
    let mut children: Vec<Genotype> = pg_parents
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let s = rng::derive_seed(seed, &[tag::PG, iteration, i as u64]);
            pg_variation(g, &learner.td3, &learner.buffer, cfg.td3.pg_steps, &cfg.td3, s)
        })
        .collect::<Result<_, _>>()?;
    children.extend(ga_children(pool, n - n_pg, &cfg.variation(), seed, iteration)?);
    Ok(children)
}

/// Inserts evaluations in candidate order; returns the number inserted.
fn insert_all(rep: &mut CvtRepertoire, children: &[Genotype], evals: &[Evaluation]) -> Result<usize, QdError> {
    let mut inserted = 0;
    for (g, e) in children.iter().zip(evals) {
        inserted += usize::from(rep.insert(g, e.fitness, &e.descriptor)?.inserted());
    }
    Ok(inserted)
}

pub fn map_elites_init(
    env: &EnvSpec,
    spec: &NetSpec,
    template: &CvtRepertoire,
    cfg: &GaConfig,
    seed: u64,
) -> Result<CvtState, QdError> {
    let pop = initial_population(spec, cfg.init_batch, seed);
    let evals = evaluate_all(&pop, env, spec, seed, 0)?;
    let mut rep = template.empty_like();
    insert_all(&mut rep, &pop, &evals)?;
    Ok(CvtState {
        rep,
        iteration: 0,
        env_steps: evals.iter().map(|e| e.steps as u64).sum(),
    })
}

/// One MAP-Elites iteration: uniform selection, Iso+LineDD, evaluation and
/// insertion of `batch_size` children.
pub fn map_elites_iteration(
    state: &mut CvtState,
    env: &EnvSpec,
    spec: &NetSpec,
    cfg: &GaConfig,
    seed: u64,
) -> Result<usize, QdError> {
    let it = state.iteration + 1;
    let pool = state.rep.genotypes();
    let children = ga_children(&pool, cfg.batch_size, &cfg.variation(), seed, it)?;
    let evals = evaluate_all(&children, env, spec, seed, it)?;
    let inserted = insert_all(&mut state.rep, &children, &evals)?;
    state.iteration = it;
    state.env_steps += evals.iter().map(|e| e.steps as u64).sum::<u64>();
    Ok(inserted)
}

pub fn pga_init(
    env: &EnvSpec,
    spec: &NetSpec,
    template: &CvtRepertoire,
    cfg: &PgaConfig,
    seed: u64,
) -> Result<(CvtState, PgaLearner), QdError> {
    let mut learner = PgaLearner::new(env, spec, &cfg.td3, seed)?;
    let pop = initial_population(spec, cfg.init_batch, seed);
    let trajs = rollout_all(&pop, env, spec, seed, 0)?;
    learner.record(&trajs, env.action_bound)?;
    let mut rep = template.empty_like();
    for (g, t) in pop.iter().zip(&trajs) {
        rep.insert(g, t.fitness, &t.descriptor)?;
    }
    let steps = trajs.iter().map(|t| t.transitions.len() as u64).sum();
    Ok((
        CvtState {
            rep,
            iteration: 0,
            env_steps: steps,
        },
        learner,
    ))
}

/// One PGA-MAP-Elites iteration. The critics are trained first, so the
/// policy-gradient operator always sees trained critics.
pub fn pga_iteration(
    state: &mut CvtState,
    learner: &mut PgaLearner,
    env: &EnvSpec,
    spec: &NetSpec,
    cfg: &PgaConfig,
    seed: u64,
) -> Result<usize, QdError> {
    let it = state.iteration + 1;
    let mut r = rng::stream(seed, &[tag::CRITIC, it]);
    learner.td3.critic_update(&learner.buffer, cfg.td3.critic_steps, &cfg.td3, &mut r)?;
    let pool = state.rep.genotypes();
    let children = pga_children(&pool, cfg.batch_size, cfg, learner, seed, it)?;
    let trajs = rollout_all(&children, env, spec, seed, it)?;
    learner.record(&trajs, env.action_bound)?;
    let mut inserted = 0;
    for (g, t) in children.iter().zip(&trajs) {
        inserted += usize::from(state.rep.insert(g, t.fitness, &t.descriptor)?.inserted());
    }
    state.iteration = it;
    state.env_steps += trajs.iter().map(|t| t.transitions.len() as u64).sum::<u64>();
    Ok(inserted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::policy::{deterministic_spec, NetConfig};
    use crate::repertoire::CvtParams;

    fn setup(kind: EnvKind, cells: usize) -> (EnvSpec, NetSpec, CvtRepertoire) {
        let env = EnvSpec {
            horizon: 30,
            ..EnvSpec::shipped(kind)
        };
        let spec = deterministic_spec(&env, &NetConfig { hidden: vec![8] }).unwrap();
        let rep = CvtRepertoire::build(kind.id(), env.descriptor_bounds(), cells, 0, CvtParams::default()).unwrap();
        (env, spec, rep)
    }

    #[test]
    fn map_elites_coverage_is_monotone() {
        let (env, spec, rep) = setup(EnvKind::PointOmni, 64);
        let cfg = GaConfig {
            batch_size: 20,
            init_batch: 20,
            ..GaConfig::default()
        };
        let mut st = map_elites_init(&env, &spec, &rep, &cfg, 1).unwrap();
        assert_eq!(st.env_steps, 20 * 30);
        let mut prev = st.rep.coverage();
        for _ in 0..200 {
            map_elites_iteration(&mut st, &env, &spec, &cfg, 1).unwrap();
            assert!(st.rep.coverage() >= prev);
            prev = st.rep.coverage();
        }
        assert_eq!(st.env_steps, 20 * 30 * 201);
    }

    #[test]
    fn optimal_repertoire_is_left_unchanged() {
        // Zero-action policies score the maximal omni fitness of 0, so no
        // child can strictly improve any cell.
        let (env, spec, rep) = setup(EnvKind::PointOmni, 16);
        let mut st = CvtState {
            rep: rep.empty_like(),
            iteration: 0,
            env_steps: 0,
        };
        for c in 0..rep.num_cells() {
            let d = rep.centroid(c).to_vec();
            st.rep.insert(&Genotype::zeros(&spec), 0.0, &d).unwrap();
        }
        let before = st.rep.to_bytes();
        let cfg = GaConfig {
            batch_size: 30,
            ..GaConfig::default()
        };
        map_elites_iteration(&mut st, &env, &spec, &cfg, 2).unwrap();
        assert_eq!(st.rep.to_bytes(), before);
    }

    #[test]
    fn pga_split_and_bookkeeping() {
        let (env, spec, rep) = setup(EnvKind::PointGait, 32);
        let cfg = PgaConfig {
            batch_size: 10,
            init_batch: 10,
            td3: Td3Config {
                critic_hidden: vec![8],
                batch_size: 16,
                critic_steps: 4,
                pg_steps: 3,
                ..Td3Config::default()
            },
            ..PgaConfig::default()
        };
        assert_eq!(cfg.pg_count(100), 50);
        let (mut st, mut learner) = pga_init(&env, &spec, &rep, &cfg, 3).unwrap();
        assert_eq!(learner.buffer.len(), 10 * 30);
        let cov = st.rep.coverage();
        pga_iteration(&mut st, &mut learner, &env, &spec, &cfg, 3).unwrap();
        assert_eq!(learner.buffer.len(), 20 * 30);
        assert_eq!(st.env_steps, 20 * 30);
        assert!(st.rep.coverage() >= cov);
        assert_eq!(learner.td3.critic_updates, 4);
    }

    #[test]
    fn runs_are_reproducible() {
        let (env, spec, rep) = setup(EnvKind::PointMaze, 32);
        let cfg = GaConfig {
            batch_size: 16,
            init_batch: 16,
            ..GaConfig::default()
        };
        let run = || {
            let mut st = map_elites_init(&env, &spec, &rep, &cfg, 9).unwrap();
            for _ in 0..5 {
                map_elites_iteration(&mut st, &env, &spec, &cfg, 9).unwrap();
            }
            st.rep.to_bytes()
        };
        assert_eq!(run(), run());
    }
}
