//! Evaluation protocols run from configs or trained run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use tracing::info;

use super::config::{AdaptConfig, AdaptKind, Method, RunConfig};
use super::export::ADAPTATION_FILE;
use super::run::{self, Setup};
use super::HarnessError;
use crate::envs::{self, EnvKind, Policy};
use crate::eval::{
    self, adaptation_eval, dynamics_grid, drift_grid, hierarchical_train, log_grid, run_jump_skills,
    sample_targets, target_adaptation_eval, AdaptationReport, CurvePoint, SweepSummary,
};
use crate::rng::{self, tag};
use crate::skill_rl;

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Few-shot adaptation of the skills stored in `dir`. Writes
/// `adaptation.csv` and `adaptation.json` next to the checkpoint.
pub fn adapt(dir: &Path, settings: Option<&AdaptConfig>) -> Result<AdaptationReport, HarnessError> {
    let cfg = run::load_run_config(dir)?;
    let a = settings.unwrap_or(&cfg.adapt);
    let setup = Setup::new(&cfg)?;
    let pool = run::load_state(dir)?.skill_pool()?;
    let boxes = pool.policies(&setup);
    let skills: Vec<&dyn Policy> = boxes.iter().map(|b| b.as_ref()).collect();
    let seed = rng::derive_seed(cfg.seed, &[tag::ADAPT]);
    let env = &setup.env;
    info!(skills = skills.len(), kind = ?a.kind, "adaptation");
    let report = match a.kind {
        AdaptKind::DynamicsScale => {
            let grid = dynamics_grid(&a.channels, &log_grid(a.lo, a.hi, a.points, Some(1.0)));
            adaptation_eval(&skills, env, "dynamics-scale", &grid, a.n_eval, seed)?
        }
        AdaptKind::DriftScale => {
            let grid = drift_grid(&log_grid(a.lo, a.hi, a.points, Some(1.0)));
            adaptation_eval(&skills, env, "drift-scale", &grid, a.n_eval, seed)?
        }
        AdaptKind::MoveTarget => {
            let targets = sample_targets(env, a.targets, seed);
            target_adaptation_eval(&skills, env, &targets, a.n_eval, seed)?
        }
    };
    write(&dir.join(ADAPTATION_FILE), &report.to_csv())?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    write(&dir.join("adaptation.json"), &(json + "\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct HierOutcome {
    /// Fitness of each skill run alone for a whole episode.
    pub single_skill_fitness: Vec<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Trains a meta-controller over frozen skills: those of the run in
/// `skills_dir`, or the hand-built run/jump pair on point-hurdle. Writes
/// `hier.csv` and `hier.json` into `out`.
pub fn hier(cfg: &RunConfig, skills_dir: Option<&Path>, out: &Path) -> Result<HierOutcome, HarnessError> {
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let seed = rng::derive_seed(cfg.seed, &[tag::META]);
    let (env, single, curve) = match skills_dir {
        Some(d) => {
            let setup = Setup::new(&run::load_run_config(d)?)?;
            let pool = run::load_state(d)?.skill_pool()?;
            let boxes = pool.policies(&setup);
            let skills: Vec<&dyn Policy> = boxes.iter().map(|b| b.as_ref()).collect();
            let single = single_fitness(&skills, &setup.env, seed)?;
            let (_, curve) = hierarchical_train(&skills, &setup.env, &cfg.hier.ppo, cfg.hier.env_steps, seed)?;
            (setup.env.clone(), single, curve)
        }
        None => {
            let env = cfg.env_spec().map_err(HarnessError::Setup)?;
            if env.kind != EnvKind::PointHurdle {
                return Err(HarnessError::Setup(
                    "the built-in run/jump skills need env = \"point-hurdle\"; pass a run directory otherwise".into(),
                ));
            }
            let pair = run_jump_skills(&env);
            let skills: Vec<&dyn Policy> = pair.iter().map(|p| p as &dyn Policy).collect();
            let single = single_fitness(&skills, &env, seed)?;
            let (_, curve) = hierarchical_train(&skills, &env, &cfg.hier.ppo, cfg.hier.env_steps, seed)?;
            (env, single, curve)
        }
    };
    let mut csv = String::from("env_steps,mean_fitness,greedy_fitness\n");
    for c in &curve {
        csv.push_str(&format!("{},{},{}\n", c.env_steps, c.mean_fitness, c.greedy_fitness));
    }
    write(&out.join("hier.csv"), &csv)?;
    let outcome = HierOutcome {
        single_skill_fitness: single,
        curve,
    };
    let json = serde_json::to_string_pretty(&outcome).expect("outcomes serialize");
    write(&out.join("hier.json"), &(json + "\n"))?;
    info!(env = env.kind.id(), "hierarchical training finished");
    Ok(outcome)
}

fn single_fitness(skills: &[&dyn Policy], env: &envs::EnvSpec, seed: u64) -> Result<Vec<f64>, HarnessError> {
    skills
        .iter()
        .map(|p| Ok(envs::evaluate(*p, env, seed)?.fitness))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmerlTarget {
    pub target_return: f64,
    pub epsilon: f64,
    pub per_seed: Vec<f64>,
}

impl SmerlTarget {
    /// Config fragment to merge into a `smerl-*` run config.
    pub fn fragment(&self) -> String {
        format!(
            "# Median over {} plain SAC runs of the best recorded return.\n[skill.shaping]\ntarget_return = {:?}\nepsilon = {:?}\n",
            self.per_seed.len(),
            self.target_return,
            self.epsilon
        )
    }
}

/// Trains plain SAC on `smerl.seeds` derived seeds and takes the median of
/// the best returns as the SMERL target.
pub fn smerl_target(cfg: &RunConfig) -> Result<SmerlTarget, HarnessError> {
    let setup = Setup::new(cfg)?;
    let seeds: Vec<u64> = (0..cfg.smerl.seeds as u64)
        .map(|i| rng::derive_seed(cfg.seed, &[tag::SMERL, i]))
        .collect();
    let (target, per_seed) =
        skill_rl::smerl_target(&setup.env, &cfg.skill, &setup.template, &seeds, cfg.smerl.env_steps)?;
    Ok(SmerlTarget {
        target_return: target,
        epsilon: 0.1 * target.abs(),
        per_seed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub summaries: Vec<SweepSummary>,
}

/// The 3x3 sensitivity grid of a method as concrete configs.
pub fn sweep_cells(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    match cfg.method {
        Method::MapElites | Method::Aurora => eval::me_sweep_grid()
            .into_iter()
            .map(|(label, (iso, line))| {
                let mut c = cfg.clone();
                c.map_elites.sigma_iso = iso;
                c.map_elites.sigma_line = line;
                (label, c)
            })
            .collect(),
        Method::PgaMapElites | Method::PgaAurora => eval::me_sweep_grid()
            .into_iter()
            .map(|(label, (iso, line))| {
                let mut c = cfg.clone();
                c.pga.sigma_iso = iso;
                c.pga.sigma_line = line;
                (label, c)
            })
            .collect(),
        _ => eval::skill_sweep_grid()
            .into_iter()
            .map(|(label, (beta, alpha))| {
                let mut c = cfg.clone();
                c.skill.shaping.beta = beta;
                c.skill.sac.alpha = alpha;
                (label, c)
            })
            .collect(),
    }
}

/// Final QD score of one in-memory run per grid cell and seed.
pub fn sweep_scores(cfg: &RunConfig) -> Result<Vec<eval::SweepCell>, HarnessError> {
    let base = Setup::new(cfg)?;
    let seeds: Vec<u64> = (0..cfg.sweep.seeds as u64)
        .map(|i| rng::derive_seed(cfg.seed, &[tag::SWEEP, i]))
        .collect();
    eval::run_sweep(&sweep_cells(cfg), &seeds, |c, seed| {
        let cell = RunConfig { seed, ..c.clone() };
        cell.validate()?;
        let setup = Setup {
            cfg: cell,
            ..base.clone()
        };
        let (_, rows) = run::train_in_memory(&setup)?;
        let score = rows.last().expect("at least the initial row").qd_score;
        info!(method = %cfg.method, seed, score, "sweep run");
        Ok::<f64, HarnessError>(score)
    })
}

/// Runs the sweep of every config and summarises them, normalising by the
/// best cell median among configs on the same environment.
pub fn sweep(cfgs: &[RunConfig], out: Option<&Path>) -> Result<SweepOutcome, HarnessError> {
    let mut scored = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        scored.push((c, sweep_scores(c)?));
    }
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for (c, cells) in &scored {
        let m = cells.iter().map(|x| x.median).fold(f64::NEG_INFINITY, f64::max);
        let e = best.entry(c.env.as_str()).or_insert(f64::NEG_INFINITY);
        *e = e.max(m);
    }
    let summaries: Vec<SweepSummary> = scored
        .into_iter()
        .map(|(c, cells)| eval::summarize_sweep(&format!("{}@{}", c.method, c.env), cells, best[c.env.as_str()]))
        .collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut cells = String::new();
        let mut summary = String::from("method,normalizer,q125,q25,median,q75,q875,iqr\n");
        for (i, s) in summaries.iter().enumerate() {
            let csv = s.to_csv();
            cells.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
            summary.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.method,
                s.normalizer,
                s.q125,
                s.q25,
                s.median,
                s.q75,
                s.q875,
                s.iqr()
            ));
        }
        write(&dir.join("sweep_cells.csv"), &cells)?;
        write(&dir.join("sweep_summary.csv"), &summary)?;
        let json = serde_json::to_string_pretty(&summaries).expect("summaries serialize");
        write(&dir.join("sweep.json"), &(json + "\n"))?;
    }
    Ok(SweepOutcome { summaries })
}
