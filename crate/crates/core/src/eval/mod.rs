//! Evaluation protocols: few-shot adaptation under perturbation grids,
//! hierarchical composition and hyperparameter sweeps.

pub mod hier;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hier::{hierarchical_train, meta_rollout, run_jump_skills, CurvePoint, MetaController, MetaEpisode, PpoConfig};

use crate::envs::{self, apply_perturbation, EnvError, EnvSpec, Perturbation, Policy};
use crate::nn::NnError;
use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no skills to evaluate")]
    NoSkills,
    #[error("n_eval must be positive")]
    NoEvaluations,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid evaluation setup: {0}")]
    Config(String),
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// `n` log-spaced values over `[lo, hi]` with the point nearest to
/// `nominal` (in log distance) replaced by `nominal` itself.
pub fn log_grid(lo: f64, hi: f64, n: usize, nominal: Option<f64>) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1);
    let mut grid: Vec<f64> = if n == 1 {
        vec![lo]
    } else {
        (0..n).map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp()).collect()
    };
    if let Some(nom) = nominal.filter(|&v| v > 0.0) {
        let k = (0..n)
            .min_by(|&a, &b| (grid[a].ln() - nom.ln()).abs().total_cmp(&(grid[b].ln() - nom.ln()).abs()))
            .unwrap();
        grid[k] = nom;
    }
    grid
}

/// Relative change `(median - nominal) / |nominal|`; an absolute difference
/// when the nominal fitness is zero.
pub fn fitness_gain(median: f64, nominal: f64) -> f64 {
    if nominal.abs() < 1e-12 {
        median - nominal
    } else {
        (median - nominal) / nominal.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRow {
    pub value: f64,
    /// New target, for target adaptation.
    pub target: Option<[f64; 2]>,
    pub best_skill: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub fitness_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub perturbation: String,
    pub n_eval: usize,
    pub num_skills: usize,
    pub nominal_skill: usize,
    pub nominal_fitness: f64,
    pub rows: Vec<AdaptationRow>,
}

impl AdaptationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,target_x,target_y,best_skill,median,q25,q75,fitness_gain\n");
        for r in &self.rows {
            let (tx, ty) = r.target.map_or((String::new(), String::new()), |t| (t[0].to_string(), t[1].to_string()));
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.value, tx, ty, r.best_skill, r.median, r.q25, r.q75, r.fitness_gain
            ));
        }
        s
    }
}

/// Seed of evaluation `j`; independent of the perturbation so that the
/// nominal grid point replays the unperturbed evaluations exactly.
fn eval_seed(seed: u64, j: usize) -> u64 {
    rng::derive_seed(seed, &[tag::ADAPT, j as u64])
}

/// `(median, q25, q75)` of every skill over `n_eval` episodes.
fn skill_stats(skills: &[&dyn Policy], env: &EnvSpec, n_eval: usize, seed: u64) -> Result<Vec<[f64; 3]>, EvalError> {
    skills
        .par_iter()
        .map(|p| {
            let f = (0..n_eval)
                .map(|j| envs::evaluate(*p, env, eval_seed(seed, j)).map(|e| e.fitness))
                .collect::<Result<Vec<_>, _>>()?;
            let mut sorted = f;
            sorted.sort_by(f64::total_cmp);
            Ok([quantile_sorted(&sorted, 0.5), quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75)])
        })
        .collect()
}

/// Index of the best median; the lowest index wins ties.
fn best(stats: &[[f64; 3]]) -> usize {
    let mut k = 0;
    for (i, s) in stats.iter().enumerate() {
        if s[0] > stats[k][0] {
            k = i;
        }
    }
    k
}

fn check(skills: &[&dyn Policy], n_eval: usize) -> Result<(), EvalError> {
    if skills.is_empty() {
        return Err(EvalError::NoSkills);
    }
    if n_eval == 0 {
        return Err(EvalError::NoEvaluations);
    }
    Ok(())
}

/// Evaluates every skill `n_eval` times at each perturbation and keeps the
/// skill with the best median fitness. `grid` pairs a reported value with
/// the perturbation applied at it.
pub fn adaptation_eval(
    skills: &[&dyn Policy],
    env: &EnvSpec,
    label: &str,
    grid: &[(f64, Perturbation)],
    n_eval: usize,
    seed: u64,
) -> Result<AdaptationReport, EvalError> {
    check(skills, n_eval)?;
    let nominal = skill_stats(skills, env, n_eval, seed)?;
    let nominal_skill = best(&nominal);
    let nominal_fitness = nominal[nominal_skill][0];
    let mut rows = Vec::with_capacity(grid.len());
    for (value, p) in grid {
        let perturbed = apply_perturbation(env, p)?;
        let stats = skill_stats(skills, &perturbed, n_eval, seed)?;
        let k = best(&stats);
        rows.push(AdaptationRow {
            value: *value,
            target: match p {
                Perturbation::MoveTarget { target } => Some(*target),
                _ => None,
            },
            best_skill: k,
            median: stats[k][0],
            q25: stats[k][1],
            q75: stats[k][2],
            fitness_gain: fitness_gain(stats[k][0], nominal_fitness),
        });
    }
    Ok(AdaptationReport {
        perturbation: label.to_string(),
        n_eval,
        num_skills: skills.len(),
        nominal_skill,
        nominal_fitness,
        rows,
    })
}

/// Dynamics-scale grid over `channels`.
pub fn dynamics_grid(channels: &[usize], values: &[f64]) -> Vec<(f64, Perturbation)> {
    values
        .iter()
        .map(|&factor| (factor, Perturbation::DynamicsScale { channels: channels.to_vec(), factor }))
        .collect()
}

pub fn drift_grid(values: &[f64]) -> Vec<(f64, Perturbation)> {
    values.iter().map(|&factor| (factor, Perturbation::DriftScale { factor })).collect()
}

/// `n` targets drawn uniformly inside the arena.
pub fn sample_targets(env: &EnvSpec, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng::stream(seed, &[tag::ADAPT, u64::MAX]);
    let [x0, y0, x1, y1] = env.arena;
    (0..n).map(|_| [r.random_range(x0..=x1), r.random_range(y0..=y1)]).collect()
}

/// Adaptation to moved targets; the row value is the target's index.
pub fn target_adaptation_eval(
    skills: &[&dyn Policy],
    env: &EnvSpec,
    targets: &[[f64; 2]],
    n_eval: usize,
    seed: u64,
) -> Result<AdaptationReport, EvalError> {
    if env.target.is_none() {
        return Err(EvalError::Config(format!("{} has no target to move", env.kind.id())));
    }
    let grid: Vec<(f64, Perturbation)> = targets
        .iter()
        .enumerate()
        .map(|(i, &target)| (i as f64, Perturbation::MoveTarget { target }))
        .collect();
    adaptation_eval(skills, env, "move-target", &grid, n_eval, seed)
}

/// Quantiles of normalised sweep scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: String,
    pub cells: Vec<SweepCell>,
    pub normalizer: f64,
    pub q125: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q875: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub scores: Vec<f64>,
    pub median: f64,
}

impl SweepSummary {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,cell,seed_index,qd_score,normalized\n");
        for c in &self.cells {
            for (i, v) in c.scores.iter().enumerate() {
                s.push_str(&format!("{},{},{},{},{}\n", self.method, c.label, i, v, v / self.normalizer));
            }
        }
        s
    }
}

/// Runs `run(cell, seed)` over the whole grid. Cells run in order; `run` may
/// parallelise internally.
pub fn run_sweep<C, E>(
    cells: &[(String, C)],
    seeds: &[u64],
    mut run: impl FnMut(&C, u64) -> Result<f64, E>,
) -> Result<Vec<SweepCell>, E> {
    cells
        .iter()
        .map(|(label, c)| {
            let scores = seeds.iter().map(|&s| run(c, s)).collect::<Result<Vec<_>, E>>()?;
            Ok(SweepCell { label: label.clone(), median: median(&scores), scores })
        })
        .collect()
}

/// Quantile summary over per-cell medians divided by `normalizer` (the
/// largest QD score seen on the task).
pub fn summarize_sweep(method: &str, cells: Vec<SweepCell>, normalizer: f64) -> SweepSummary {
    let norm = if normalizer.abs() > 0.0 { normalizer } else { 1.0 };
    let mut meds: Vec<f64> = cells.iter().map(|c| c.median / norm).collect();
    meds.sort_by(f64::total_cmp);
    SweepSummary {
        method: method.to_string(),
        normalizer: norm,
        q125: quantile_sorted(&meds, 0.125),
        q25: quantile_sorted(&meds, 0.25),
        median: quantile_sorted(&meds, 0.5),
        q75: quantile_sorted(&meds, 0.75),
        q875: quantile_sorted(&meds, 0.875),
        cells,
    }
}

/// The 3x3 grids of the sensitivity study: `(iso sigma, line sigma)` for
/// MAP-Elites and `(beta, alpha)` for the skill methods.
pub fn me_sweep_grid() -> Vec<(String, (f64, f64))> {
    let mut g = Vec::new();
    for iso in [0.001, 0.01, 0.1] {
        for line in [0.01, 0.1, 1.0] {
            g.push((format!("iso={iso};line={line}"), (iso, line)));
        }
    }
    g
}

pub fn skill_sweep_grid() -> Vec<(String, (f64, f64))> {
    let mut g = Vec::new();
    for beta in [0.1, 1.0, 10.0] {
        for alpha in [0.1, 0.5, 1.0] {
            g.push((format!("beta={beta};alpha={alpha}"), (beta, alpha)));
        }
    }
    g
}
