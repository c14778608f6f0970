//! Configuration, orchestration, persistence and export behind the command
//! line front end.

pub mod config;
pub mod export;
pub mod protocols;
pub mod run;

use std::path::Path;

use thiserror::Error;

pub use config::{ConfigError, KeyIssue, Method, RunConfig};
pub use export::{export, ExportFormat};
pub use protocols::{adapt, hier, smerl_target, sweep, SweepOutcome};
pub use run::{load_run_config, load_state, run, train_in_memory, MethodState, MetricsRow, RunOptions, RunOutcome, Setup};

use crate::envs::EnvError;
use crate::eval::EvalError;
use crate::nn::NnError;
use crate::qd::QdError;
use crate::repertoire::RepertoireError;
use crate::skill_rl::SkillError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing or malformed artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Repertoire(#[from] RepertoireError),
    #[error(transparent)]
    Qd(#[from] QdError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
