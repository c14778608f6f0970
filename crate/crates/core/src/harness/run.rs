//! Training driver: one loop for every method, with metric rows, periodic
//! checkpoints and resume.
//!
//! Run directory layout:
//!
//! * `config.toml`: the resolved config.
//! * `metrics.csv`: `iteration,env_steps,max_fitness,coverage,qd_score`.
//! * `timing.csv`: `iteration,wall_seconds`, one row per metric row. Kept
//!   apart so `metrics.csv` is byte-identical across repeated runs.
//! * `checkpoint.bin`: method state, written atomically.
//! * `skillset.json`: final skill-conditioned policy (RL methods only).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::config::{Budget, Method, RunConfig};
use super::HarnessError;
use crate::envs::{EnvSpec, Policy};
use crate::nn::{Genotype, NetSpec};
use crate::policy::{deterministic_spec, DeterministicPolicy};
use crate::qd::{self, AuroraState, AuroraVariation, CvtState, PgaLearner};
use crate::repertoire::{CvtRepertoire, QdMetrics};
use crate::skill_rl::{SkillSet, SkillTrainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const SKILLSET_FILE: &str = "skillset.json";
pub const METRICS_HEADER: &str = "iteration,env_steps,max_fitness,coverage,qd_score";
pub const TIMING_HEADER: &str = "iteration,wall_seconds";

/// Everything derived from a config that stays fixed during a run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: RunConfig,
    pub env: EnvSpec,
    pub spec: NetSpec,
    /// Empty repertoire defining the cells every metric is computed on.
    pub template: CvtRepertoire,
    pub offset: f64,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let env = cfg.env_spec().map_err(HarnessError::Setup)?;
        let spec = deterministic_spec(&env, &cfg.policy)?;
        let r = &cfg.repertoire;
        let template = CvtRepertoire::build(
            env.kind.id(),
            env.descriptor_bounds(),
            r.cells,
            r.cvt_seed,
            r.params(),
        )?;
        Ok(Self {
            offset: -env.fitness_lower_bound(),
            cfg: cfg.clone(),
            env,
            spec,
            template,
        })
    }
}

/// Per-method training state.
#[derive(Debug, Clone)]
pub enum MethodState {
    Cvt {
        state: CvtState,
        learner: Option<PgaLearner>,
    },
    Aurora(AuroraState),
    Skill(Box<SkillTrainer>),
}

#[derive(Serialize, Deserialize)]
enum Snapshot {
    Cvt {
        rep: Vec<u8>,
        iteration: u64,
        env_steps: u64,
        learner: Option<PgaLearner>,
    },
    Aurora(AuroraState),
    Skill(Vec<u8>),
}

impl MethodState {
    /// Initial population (QD) or an untrained learner (RL).
    pub fn init(s: &Setup) -> Result<Self, HarnessError> {
        let c = &s.cfg;
        Ok(match c.method {
            Method::MapElites => MethodState::Cvt {
                state: qd::map_elites_init(&s.env, &s.spec, &s.template, &c.map_elites, c.seed)?,
                learner: None,
            },
            Method::PgaMapElites => {
                let (state, learner) = qd::pga_init(&s.env, &s.spec, &s.template, &c.pga, c.seed)?;
                MethodState::Cvt {
                    state,
                    learner: Some(learner),
                }
            }
            Method::Aurora | Method::PgaAurora => {
                MethodState::Aurora(qd::aurora_init(&s.env, &s.spec, &c.aurora, variation(c), c.seed)?)
            }
            _ => MethodState::Skill(Box::new(SkillTrainer::new(&s.env, &c.skill, &s.template, c.seed)?)),
        })
    }

    pub fn step(&mut self, s: &Setup) -> Result<(), HarnessError> {
        let c = &s.cfg;
        match self {
            MethodState::Cvt { state, learner: None } => {
                qd::map_elites_iteration(state, &s.env, &s.spec, &c.map_elites, c.seed)?;
            }
            MethodState::Cvt {
                state,
                learner: Some(l),
            } => {
                qd::pga_iteration(state, l, &s.env, &s.spec, &c.pga, c.seed)?;
            }
            MethodState::Aurora(a) => {
                qd::aurora_iteration(a, &s.env, &s.spec, &c.aurora, variation(c), c.seed)?;
            }
            MethodState::Skill(t) => {
                t.iteration()?;
            }
        }
        Ok(())
    }

    pub fn iteration(&self) -> u64 {
        match self {
            MethodState::Cvt { state, .. } => state.iteration,
            MethodState::Aurora(a) => a.iteration,
            MethodState::Skill(t) => t.iteration,
        }
    }

    pub fn env_steps(&self) -> u64 {
        match self {
            MethodState::Cvt { state, .. } => state.env_steps,
            MethodState::Aurora(a) => a.env_steps,
            MethodState::Skill(t) => t.env_steps,
        }
    }

    /// The repertoire the metrics are read from: the archive itself, the
    /// AURORA archive projected on the template cells, or the passive
    /// repertoire of an RL method.
    pub fn repertoire(&self, s: &Setup) -> Result<CvtRepertoire, HarnessError> {
        Ok(match self {
            MethodState::Cvt { state, .. } => state.rep.clone(),
            MethodState::Aurora(a) => a.archive.project(&s.template)?,
            MethodState::Skill(t) => t.passive.clone(),
        })
    }

    pub fn metrics(&self, s: &Setup) -> Result<QdMetrics, HarnessError> {
        Ok(match self {
            MethodState::Cvt { state, .. } => state.rep.metrics(s.offset),
            MethodState::Aurora(a) => a.metrics(&s.template, s.offset)?,
            MethodState::Skill(t) => t.passive.metrics(s.offset),
        })
    }

    /// Skills available for adaptation and composition.
    pub fn skill_pool(&self) -> Result<SkillPool, HarnessError> {
        Ok(match self {
            MethodState::Cvt { state, .. } => SkillPool::Genotypes(state.rep.genotypes()),
            MethodState::Aurora(a) => {
                SkillPool::Genotypes(a.archive.entries.iter().map(|e| e.genotype.clone()).collect())
            }
            MethodState::Skill(t) => SkillPool::Set(t.skill_set()?),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let snap = match self {
            MethodState::Cvt { state, learner } => Snapshot::Cvt {
                rep: state.rep.to_bytes(),
                iteration: state.iteration,
                env_steps: state.env_steps,
                learner: learner.clone(),
            },
            MethodState::Aurora(a) => Snapshot::Aurora(a.clone()),
            MethodState::Skill(t) => Snapshot::Skill(t.to_bytes()),
        };
        bincode::serialize(&snap).expect("in-memory serialisation cannot fail")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let snap: Snapshot = bincode::deserialize(bytes).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        Ok(match snap {
            Snapshot::Cvt {
                rep,
                iteration,
                env_steps,
                learner,
            } => MethodState::Cvt {
                state: CvtState {
                    rep: CvtRepertoire::from_bytes(&rep)?,
                    iteration,
                    env_steps,
                },
                learner,
            },
            Snapshot::Aurora(a) => MethodState::Aurora(a),
            Snapshot::Skill(b) => MethodState::Skill(Box::new(SkillTrainer::from_bytes(&b)?)),
        })
    }
}

fn variation(c: &RunConfig) -> AuroraVariation<'_> {
    if c.method == Method::PgaAurora {
        AuroraVariation::PolicyGradient(&c.pga)
    } else {
        AuroraVariation::Genetic(&c.map_elites)
    }
}

/// Enumerable skills of a trained method.
#[derive(Debug, Clone)]
pub enum SkillPool {
    /// Independent deterministic policies (QD methods).
    Genotypes(Vec<Genotype>),
    /// One latent-conditioned policy (RL methods).
    Set(SkillSet),
}

impl SkillPool {
    pub fn len(&self) -> usize {
        match self {
            SkillPool::Genotypes(g) => g.len(),
            SkillPool::Set(s) => s.num_skills,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn policies<'a>(&'a self, s: &'a Setup) -> Vec<Box<dyn Policy + 'a>> {
        let bound = s.env.action_bound;
        match self {
            SkillPool::Genotypes(gs) => gs
                .iter()
                .map(|g| Box::new(DeterministicPolicy::new(&s.spec, g, bound)) as Box<dyn Policy>)
                .collect(),
            SkillPool::Set(set) => (0..set.num_skills)
                .map(|z| Box::new(set.skill(z, bound)) as Box<dyn Policy>)
                .collect(),
        }
    }
}

/// One metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub max_fitness: Option<f64>,
    pub coverage: usize,
    pub qd_score: f64,
}

impl MetricsRow {
    fn new(state: &MethodState, m: &QdMetrics) -> Self {
        Self {
            iteration: state.iteration(),
            env_steps: state.env_steps(),
            max_fitness: m.max_fitness,
            coverage: m.coverage,
            qd_score: m.qd_score,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let max = self.max_fitness.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.iteration, self.env_steps, max, self.coverage, self.qd_score
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 5 {
            return Err(format!("expected 5 fields in {line:?}"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        Ok(Self {
            iteration: f[0].parse().map_err(|e| format!("{:?}: {e}", f[0]))?,
            env_steps: f[1].parse().map_err(|e| format!("{:?}: {e}", f[1]))?,
            max_fitness: if f[2].is_empty() { None } else { Some(num(f[2])?) },
            coverage: f[3].parse().map_err(|e| format!("{:?}: {e}", f[3]))?,
            qd_score: num(f[4])?,
        })
    }
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(HarnessError::Artifact(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|l| MetricsRow::parse(l).map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    method: Method,
    rows: u64,
    wall_seconds: f64,
    finished: bool,
    state: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.bin` in the output directory.
    pub resume: bool,
    /// Checkpoint and return once this iteration is done, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub last: MetricsRow,
    pub rows: u64,
    /// False when stopped early by `stop_after`.
    pub finished: bool,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn budget_reached(b: &Budget, state: &MethodState, wall: f64) -> bool {
    b.is_zero()
        || (b.env_steps > 0 && state.env_steps() >= b.env_steps)
        || (b.iterations > 0 && state.iteration() >= b.iterations)
        || (b.wall_seconds > 0.0 && wall >= b.wall_seconds)
}

/// Keeps the header and the first `rows` rows of a CSV file.
fn truncate_rows(path: &Path, rows: u64) -> Result<(), HarnessError> {
    let text = read(path)?;
    let keep: Vec<&str> = text.lines().take(rows as usize + 1).collect();
    if keep.len() != rows as usize + 1 {
        return Err(HarnessError::Checkpoint(format!(
            "{} has fewer rows than the checkpoint records",
            path.display()
        )));
    }
    let mut out = keep.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

/// Loads the resolved config stored in a run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig, HarnessError> {
    Ok(RunConfig::from_toml(&read(&dir.join(CONFIG_FILE))?)?)
}

/// Loads the method state of a run directory.
pub fn load_state(dir: &Path) -> Result<MethodState, HarnessError> {
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    let ck: Checkpoint = bincode::deserialize(&bytes).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    MethodState::from_bytes(&ck.state)
}

struct Sink {
    dir: PathBuf,
    metrics: fs::File,
    timing: fs::File,
    rows: u64,
}

impl Sink {
    fn row(&mut self, row: &MetricsRow, wall: f64) -> Result<(), HarnessError> {
        writeln!(self.metrics, "{}", row.to_csv_line()).map_err(|e| HarnessError::io(&self.dir, e))?;
        writeln!(self.timing, "{},{wall}", row.iteration).map_err(|e| HarnessError::io(&self.dir, e))?;
        self.rows += 1;
        info!(
            iteration = row.iteration,
            env_steps = row.env_steps,
            coverage = row.coverage,
            qd_score = row.qd_score,
            "metrics"
        );
        Ok(())
    }

    fn checkpoint(&mut self, state: &MethodState, method: Method, wall: f64, finished: bool) -> Result<(), HarnessError> {
        self.metrics.flush().map_err(|e| HarnessError::io(&self.dir, e))?;
        self.timing.flush().map_err(|e| HarnessError::io(&self.dir, e))?;
        let ck = Checkpoint {
            method,
            rows: self.rows,
            wall_seconds: wall,
            finished,
            state: state.to_bytes(),
        };
        let bytes = bincode::serialize(&ck).expect("in-memory serialisation cannot fail");
        write_atomic(&self.dir.join(CHECKPOINT_FILE), &bytes)
    }
}

fn open_append(path: &Path) -> Result<fs::File, HarnessError> {
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))
}

/// Every field except the budget and the output path must match to resume.
fn check_resumable(stored: &RunConfig, given: &RunConfig) -> Result<(), HarnessError> {
    let strip = |c: &RunConfig| RunConfig {
        budget: Budget::default(),
        out: String::new(),
        ..c.clone()
    };
    if strip(stored) != strip(given) {
        return Err(HarnessError::Setup(
            "config differs from the stored run in more than budget and out".into(),
        ));
    }
    Ok(())
}

/// Trains `cfg` into `dir` (created if needed).
pub fn run(cfg: &RunConfig, dir: &Path, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let (cfg, state, mut sink, wall_before) = if opts.resume {
        let stored = load_run_config(dir)?;
        check_resumable(&stored, cfg)?;
        let path = dir.join(CHECKPOINT_FILE);
        let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        let ck: Checkpoint = bincode::deserialize(&bytes).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        if ck.method != cfg.method {
            return Err(HarnessError::Checkpoint("checkpoint belongs to another method".into()));
        }
        let cfg = RunConfig {
            out: stored.out.clone(),
            ..cfg.clone()
        };
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
        truncate_rows(&dir.join(METRICS_FILE), ck.rows)?;
        truncate_rows(&dir.join(TIMING_FILE), ck.rows)?;
        let sink = Sink {
            dir: dir.to_path_buf(),
            metrics: open_append(&dir.join(METRICS_FILE))?,
            timing: open_append(&dir.join(TIMING_FILE))?,
            rows: ck.rows,
        };
        info!(dir = %dir.display(), rows = ck.rows, "resuming");
        (cfg, Some(MethodState::from_bytes(&ck.state)?), sink, ck.wall_seconds)
    } else {
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
        for (file, header) in [(METRICS_FILE, METRICS_HEADER), (TIMING_FILE, TIMING_HEADER)] {
            fs::write(dir.join(file), format!("{header}\n")).map_err(|e| HarnessError::io(&dir.join(file), e))?;
        }
        let _ = fs::remove_file(dir.join(CHECKPOINT_FILE));
        let sink = Sink {
            dir: dir.to_path_buf(),
            metrics: open_append(&dir.join(METRICS_FILE))?,
            timing: open_append(&dir.join(TIMING_FILE))?,
            rows: 0,
        };
        (cfg.clone(), None, sink, 0.0)
    };
    let setup = Setup::new(&cfg)?;
    let wall = || wall_before + started.elapsed().as_secs_f64();
    let mut state = match state {
        Some(s) => s,
        None => {
            let s = MethodState::init(&setup)?;
            let row = MetricsRow::new(&s, &s.metrics(&setup)?);
            sink.row(&row, wall())?;
            sink.checkpoint(&s, cfg.method, wall(), false)?;
            s
        }
    };
    let mut last = MetricsRow::new(&state, &state.metrics(&setup)?);
    let cadence = &cfg.cadence;
    let mut last_row_iteration = state.iteration();
    while !budget_reached(&cfg.budget, &state, wall()) {
        if opts.stop_after.is_some_and(|n| state.iteration() >= n) {
            sink.checkpoint(&state, cfg.method, wall(), false)?;
            return Ok(RunOutcome {
                dir: dir.to_path_buf(),
                last,
                rows: sink.rows,
                finished: false,
            });
        }
        state.step(&setup)?;
        let it = state.iteration();
        last = MetricsRow::new(&state, &state.metrics(&setup)?);
        if it % cadence.metrics_every == 0 {
            sink.row(&last, wall())?;
            last_row_iteration = it;
        }
        if it % cadence.checkpoint_every == 0 {
            sink.checkpoint(&state, cfg.method, wall(), false)?;
        }
    }
    if last_row_iteration != state.iteration() {
        sink.row(&last, wall())?;
    }
    sink.checkpoint(&state, cfg.method, wall(), true)?;
    if let MethodState::Skill(t) = &state {
        let json = serde_json::to_string(&t.skill_set()?).expect("skill sets serialize");
        write_atomic(&dir.join(SKILLSET_FILE), json.as_bytes())?;
    }
    info!(dir = %dir.display(), rows = sink.rows, "run finished");
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        last,
        rows: sink.rows,
        finished: true,
    })
}

/// Trains without touching the disk and returns the final state and every
/// metric row (one per iteration regardless of cadence).
pub fn train_in_memory(setup: &Setup) -> Result<(MethodState, Vec<MetricsRow>), HarnessError> {
    let started = Instant::now();
    let mut state = MethodState::init(setup)?;
    let mut rows = vec![MetricsRow::new(&state, &state.metrics(setup)?)];
    while !budget_reached(&setup.cfg.budget, &state, started.elapsed().as_secs_f64()) {
        state.step(setup)?;
        rows.push(MetricsRow::new(&state, &state.metrics(setup)?));
    }
    Ok((state, rows))
}
