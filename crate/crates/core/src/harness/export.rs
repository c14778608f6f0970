//! Plot-ready exports of run directories.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::run::{self, MethodState, Setup, METRICS_FILE};
use super::HarnessError;
use crate::eval::median;

pub const ADAPTATION_FILE: &str = "adaptation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    RepertoireCsv,
    MetricsCsv,
    AdaptationCsv,
    SummaryJson,
}

impl ExportFormat {
    pub const ALL: [ExportFormat; 4] = [
        ExportFormat::RepertoireCsv,
        ExportFormat::MetricsCsv,
        ExportFormat::AdaptationCsv,
        ExportFormat::SummaryJson,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExportFormat::RepertoireCsv => "repertoire-csv",
            ExportFormat::MetricsCsv => "metrics-csv",
            ExportFormat::AdaptationCsv => "adaptation-csv",
            ExportFormat::SummaryJson => "summary-json",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| format!("unknown export format {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub dir: String,
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub iteration: u64,
    pub env_steps: u64,
    pub max_fitness: Option<f64>,
    pub coverage: usize,
    pub qd_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianSummary {
    pub runs: usize,
    pub env_steps: f64,
    pub max_fitness: Option<f64>,
    pub coverage: f64,
    pub qd_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    /// Median over runs of each final metric.
    pub median: MedianSummary,
}

fn one_dir(dirs: &[PathBuf], format: ExportFormat) -> Result<&Path, HarnessError> {
    match dirs {
        [d] => Ok(d),
        _ => Err(HarnessError::Setup(format!("{format} takes exactly one run directory"))),
    }
}

fn read_artifact(path: &Path) -> Result<String, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::Artifact(format!("{} does not exist", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

/// Final metrics of each run directory with their median.
pub fn summarize(dirs: &[PathBuf]) -> Result<Summary, HarnessError> {
    if dirs.is_empty() {
        return Err(HarnessError::Setup("summary-json needs at least one run directory".into()));
    }
    let mut runs = Vec::with_capacity(dirs.len());
    for d in dirs {
        let cfg = run::load_run_config(d)?;
        let rows = run::read_metrics(&d.join(METRICS_FILE))?;
        let last = rows
            .last()
            .ok_or_else(|| HarnessError::Artifact(format!("{} has no metric rows", d.display())))?;
        runs.push(RunSummary {
            dir: d.display().to_string(),
            method: cfg.method.id().to_string(),
            env: cfg.env.clone(),
            seed: cfg.seed,
            iteration: last.iteration,
            env_steps: last.env_steps,
            max_fitness: last.max_fitness,
            coverage: last.coverage,
            qd_score: last.qd_score,
        });
    }
    let col = |f: &dyn Fn(&RunSummary) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let maxes: Vec<f64> = runs.iter().filter_map(|r| r.max_fitness).collect();
    let median = MedianSummary {
        runs: runs.len(),
        env_steps: col(&|r| r.env_steps as f64),
        max_fitness: (!maxes.is_empty()).then(|| median(&maxes)),
        coverage: col(&|r| r.coverage as f64),
        qd_score: col(&|r| r.qd_score),
    };
    Ok(Summary { runs, median })
}

/// Renders `format` for `dirs`. Every format except `summary-json` takes a
/// single directory.
pub fn export(dirs: &[PathBuf], format: ExportFormat) -> Result<String, HarnessError> {
    match format {
        ExportFormat::RepertoireCsv => {
            let dir = one_dir(dirs, format)?;
            let state = run::load_state(dir)?;
            let rep = match &state {
                MethodState::Aurora(_) => {
                    let setup = Setup::new(&run::load_run_config(dir)?)?;
                    state.repertoire(&setup)?
                }
                MethodState::Cvt { state, .. } => state.rep.clone(),
                MethodState::Skill(t) => t.passive.clone(),
            };
            Ok(rep.to_csv())
        }
        ExportFormat::MetricsCsv => {
            let dir = one_dir(dirs, format)?;
            let path = dir.join(METRICS_FILE);
            run::read_metrics(&path)?;
            read_artifact(&path)
        }
        ExportFormat::AdaptationCsv => read_artifact(&one_dir(dirs, format)?.join(ADAPTATION_FILE)),
        ExportFormat::SummaryJson => {
            let mut s = serde_json::to_string_pretty(&summarize(dirs)?).expect("summaries serialize");
            s.push('\n');
            Ok(s)
        }
    }
}
