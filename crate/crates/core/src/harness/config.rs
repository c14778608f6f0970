//! Declarative run configuration.
//!
//! A config is a TOML document with one section per component. Every key has
//! a default; a user document only lists what it changes. Keys are checked
//! against the serialized default tree, so misspelt or misplaced keys are
//! all reported at once rather than silently ignored.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::envs::{EnvKind, EnvSpec};
use crate::eval::PpoConfig;
use crate::policy::NetConfig;
use crate::qd::{AuroraConfig, GaConfig, PgaConfig};
use crate::repertoire::CvtParams;
use crate::skill_rl::{default_beta, ShapingMode, SkillMethod, TrainerConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Prefix of environment-variable overrides. `SKB_SKILL__SAC__ALPHA=0.5`
/// sets `skill.sac.alpha`; sections are separated by a double underscore.
pub const ENV_PREFIX: &str = "SKB_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MapElites,
    PgaMapElites,
    Aurora,
    PgaAurora,
    Diayn,
    Dads,
    DiaynReward,
    DadsReward,
    SmerlDiayn,
    SmerlDads,
    Sac,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::MapElites,
        Method::PgaMapElites,
        Method::Aurora,
        Method::PgaAurora,
        Method::Diayn,
        Method::Dads,
        Method::DiaynReward,
        Method::DadsReward,
        Method::SmerlDiayn,
        Method::SmerlDads,
        Method::Sac,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::MapElites => "map-elites",
            Method::PgaMapElites => "pga-map-elites",
            Method::Aurora => "aurora",
            Method::PgaAurora => "pga-aurora",
            Method::Diayn => "diayn",
            Method::Dads => "dads",
            Method::DiaynReward => "diayn-reward",
            Method::DadsReward => "dads-reward",
            Method::SmerlDiayn => "smerl-diayn",
            Method::SmerlDads => "smerl-dads",
            Method::Sac => "sac",
        }
    }

    pub fn is_skill_method(self) -> bool {
        self.skill_setup().is_some()
    }

    /// Learner and reward shaping of the RL methods.
    pub fn skill_setup(self) -> Option<(SkillMethod, ShapingMode)> {
        Some(match self {
            Method::Diayn => (SkillMethod::Diayn, ShapingMode::Intrinsic),
            Method::Dads => (SkillMethod::Dads, ShapingMode::Intrinsic),
            Method::DiaynReward => (SkillMethod::Diayn, ShapingMode::Sum),
            Method::DadsReward => (SkillMethod::Dads, ShapingMode::Sum),
            Method::SmerlDiayn => (SkillMethod::Diayn, ShapingMode::SmerlGate),
            Method::SmerlDads => (SkillMethod::Dads, ShapingMode::SmerlGate),
            Method::Sac => (SkillMethod::Sac, ShapingMode::None),
            _ => return None,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Stop conditions. A zero disables a cap; with every cap disabled only the
/// initial population (or an untrained learner) is measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub env_steps: u64,
    pub iterations: u64,
    /// Secondary cap. Runs stopped by it are not reproducible.
    pub wall_seconds: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            env_steps: 1_000_000,
            iterations: 0,
            wall_seconds: 0.0,
        }
    }
}

impl Budget {
    pub fn is_zero(&self) -> bool {
        self.env_steps == 0 && self.iterations == 0 && self.wall_seconds <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cadence {
    /// Iterations between metric rows.
    pub metrics_every: u64,
    /// Iterations between checkpoints.
    pub checkpoint_every: u64,
}

impl Default for Cadence {
    fn default() -> Self {
        Self {
            metrics_every: 1,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepertoireConfig {
    pub cells: usize,
    /// Seed of the tessellation, kept apart from the run seed so runs of
    /// different seeds share cells.
    pub cvt_seed: u64,
    pub samples_per_cell: usize,
    pub min_samples: usize,
    pub max_iterations: usize,
}

impl Default for RepertoireConfig {
    fn default() -> Self {
        let p = CvtParams::default();
        Self {
            cells: 1024,
            cvt_seed: 0,
            samples_per_cell: p.samples_per_cell,
            min_samples: p.min_samples,
            max_iterations: p.max_iterations,
        }
    }
}

impl RepertoireConfig {
    pub fn params(&self) -> CvtParams {
        CvtParams {
            samples_per_cell: self.samples_per_cell,
            min_samples: self.min_samples,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptKind {
    DynamicsScale,
    DriftScale,
    MoveTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub kind: AdaptKind,
    /// Action channels scaled by `dynamics-scale`.
    pub channels: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub n_eval: usize,
    /// Number of sampled targets for `move-target`.
    pub targets: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            kind: AdaptKind::DynamicsScale,
            channels: vec![0, 1],
            lo: 0.1,
            hi: 4.5,
            points: 20,
            n_eval: 100,
            targets: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierConfig {
    pub ppo: PpoConfig,
    pub env_steps: u64,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            env_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmerlConfig {
    pub seeds: usize,
    pub env_steps: u64,
}

impl Default for SmerlConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            env_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    /// Shipped environment id, or the id recorded in `env_file`.
    pub env: String,
    /// Optional TOML layout replacing the shipped one.
    pub env_file: String,
    pub seed: u64,
    pub out: String,
    pub budget: Budget,
    pub cadence: Cadence,
    pub policy: NetConfig,
    pub repertoire: RepertoireConfig,
    pub map_elites: GaConfig,
    pub pga: PgaConfig,
    pub aurora: AuroraConfig,
    pub skill: TrainerConfig,
    pub adapt: AdaptConfig,
    pub hier: HierConfig,
    pub smerl: SmerlConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: Method::MapElites,
            env: EnvKind::PointOmni.id().to_string(),
            env_file: String::new(),
            seed: 0,
            out: "runs/default".to_string(),
            budget: Budget::default(),
            cadence: Cadence::default(),
            policy: NetConfig::default(),
            repertoire: RepertoireConfig::default(),
            map_elites: GaConfig::default(),
            pga: PgaConfig::default(),
            aurora: AuroraConfig::default(),
            skill: TrainerConfig::default(),
            adapt: AdaptConfig::default(),
            hier: HierConfig::default(),
            smerl: SmerlConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// One offending key and what is wrong with it.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyIssue {
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub issues: Vec<KeyIssue>,
}

impl ConfigError {
    fn one(key: &str, message: impl Into<String>) -> Self {
        Self {
            issues: vec![KeyIssue {
                key: key.to_string(),
                message: message.into(),
            }],
        }
    }

    pub fn keys(&self) -> Vec<&str> {
        self.issues.iter().map(|i| i.key.as_str()).collect()
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config:")?;
        for i in &self.issues {
            write!(f, "\n  {}: {}", i.key, i.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// The default config as a TOML tree.
pub fn default_tree() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Dotted paths of every leaf in `table`.
pub fn leaf_keys(table: &Table) -> Vec<String> {
    fn walk(t: &Table, prefix: &str, out: &mut Vec<String>) {
        for (k, v) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(inner) => walk(inner, &path, out),
                _ => out.push(path),
            }
        }
    }
    let mut out = Vec::new();
    walk(table, "", &mut out);
    out
}

/// Keys of `user` that do not exist in `reference`.
fn unknown_keys(user: &Table, reference: &Table, prefix: &str, out: &mut Vec<KeyIssue>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, reference.get(k)) {
            (_, None) => out.push(KeyIssue {
                key: path,
                message: "unknown key".into(),
            }),
            (Value::Table(u), Some(Value::Table(r))) => unknown_keys(u, r, &path, out),
            (Value::Table(_), Some(_)) => out.push(KeyIssue {
                key: path,
                message: "expected a value, found a section".into(),
            }),
            _ => {}
        }
    }
}

fn has_key(t: &Table, path: &[&str]) -> bool {
    match path {
        [] => true,
        [k] => t.contains_key(*k),
        [k, rest @ ..] => matches!(t.get(*k), Some(Value::Table(inner)) if has_key(inner, rest)),
    }
}

fn set_key(t: &mut Table, path: &[String], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = t;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.clone(), value);
}

/// Resolves an override variable name (after the prefix) to a config path
/// using the default tree, which fixes the case of every segment.
fn resolve_env_key(name: &str, reference: &Table) -> Option<Vec<String>> {
    let mut cur = reference;
    let mut path = Vec::new();
    let parts: Vec<&str> = name.split("__").collect();
    for (i, part) in parts.iter().enumerate() {
        let want = part.to_ascii_lowercase();
        let (key, value) = cur.iter().find(|(k, _)| k.to_ascii_lowercase() == want)?;
        path.push(key.clone());
        match value {
            Value::Table(inner) if i + 1 < parts.len() => cur = inner,
            _ if i + 1 == parts.len() => return Some(path),
            _ => return None,
        }
    }
    None
}

fn parse_env_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `SKB_*` overrides to a user tree. Names that match no key are
/// reported like unknown file keys.
pub fn apply_env_overrides<I, K, V>(user: &mut Table, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let reference = default_tree();
    let mut issues = Vec::new();
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref()
                .strip_prefix(ENV_PREFIX)
                .map(|n| (n.to_string(), v.as_ref().to_string()))
        })
        .collect();
    vars.sort();
    for (name, raw) in vars {
        match resolve_env_key(&name, &reference) {
            Some(path) => set_key(user, &path, parse_env_value(&raw)),
            None => issues.push(KeyIssue {
                key: format!("{ENV_PREFIX}{name}"),
                message: "override matches no config key".into(),
            }),
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(ConfigError { issues })
    }
}

/// Deep merge of `user` over `base`.
fn merge(base: &mut Table, user: &Table) {
    for (k, v) in user {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl RunConfig {
    /// Parses a user document with optional environment overrides, fills
    /// derived defaults and validates.
    pub fn parse<I, K, V>(text: &str, env_vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut user: Table = toml::from_str(text).map_err(|e| ConfigError::one("<document>", e.to_string()))?;
        apply_env_overrides(&mut user, env_vars)?;
        Self::from_user_tree(&user)
    }

    /// Like [`RunConfig::parse`] with no overrides.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::parse(text, std::iter::empty::<(String, String)>())
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError::one("<file>", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, std::env::vars())
    }

    pub fn from_user_tree(user: &Table) -> Result<Self, ConfigError> {
        let reference = default_tree();
        let mut issues = Vec::new();
        unknown_keys(user, &reference, "", &mut issues);
        if !issues.is_empty() {
            return Err(ConfigError { issues });
        }
        let mut tree = reference;
        merge(&mut tree, user);
        let mut cfg: RunConfig = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::one("<value>", e.message().to_string()))?;
        cfg.fill_derived(user)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Settings implied by the method and the environment unless the user
    /// set them.
    fn fill_derived(&mut self, user: &Table) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        if let Some((learner, mode)) = self.method.skill_setup() {
            let set_method = has_key(user, &["skill", "method"]);
            let set_mode = has_key(user, &["skill", "shaping", "mode"]);
            if set_method && self.skill.method != learner {
                issues.push(KeyIssue {
                    key: "skill.method".into(),
                    message: format!("conflicts with method = \"{}\"", self.method),
                });
            }
            if set_mode && self.skill.shaping.mode != mode {
                issues.push(KeyIssue {
                    key: "skill.shaping.mode".into(),
                    message: format!("conflicts with method = \"{}\"", self.method),
                });
            }
            self.skill.method = learner;
            self.skill.shaping.mode = mode;
            if learner == SkillMethod::Sac {
                if has_key(user, &["skill", "num_skills"]) && self.skill.num_skills != 1 {
                    issues.push(KeyIssue {
                        key: "skill.num_skills".into(),
                        message: "plain SAC trains a single policy".into(),
                    });
                }
                self.skill.num_skills = 1;
            }
            if !has_key(user, &["skill", "shaping", "beta"]) {
                if let Some(kind) = EnvKind::from_id(&self.env) {
                    self.skill.shaping.beta = default_beta(kind);
                }
            }
            if mode == ShapingMode::SmerlGate {
                if !has_key(user, &["skill", "shaping", "target_return"]) {
                    issues.push(KeyIssue {
                        key: "skill.shaping.target_return".into(),
                        message: "SMERL needs a target return (see the smerl-target command)".into(),
                    });
                }
                if !has_key(user, &["skill", "shaping", "epsilon"]) {
                    self.skill.shaping.epsilon = 0.1 * self.skill.shaping.target_return.abs();
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |key: &str, message: String| {
            issues.push(KeyIssue {
                key: key.to_string(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            bad(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if let Err(e) = self.env_spec() {
            bad(if self.env_file.is_empty() { "env" } else { "env_file" }, e);
        }
        if self.cadence.metrics_every == 0 {
            bad("cadence.metrics_every", "must be at least 1".into());
        }
        if self.cadence.checkpoint_every == 0 {
            bad("cadence.checkpoint_every", "must be at least 1".into());
        }
        if !(self.budget.wall_seconds >= 0.0) {
            bad("budget.wall_seconds", "must be non-negative".into());
        }
        if self.repertoire.cells == 0 {
            bad("repertoire.cells", "must be positive".into());
        }
        if self.policy.hidden.contains(&0) {
            bad("policy.hidden", "layer widths must be positive".into());
        }
        match self.method {
            Method::MapElites | Method::Aurora => {
                let c = &self.map_elites;
                if c.batch_size == 0 || c.init_batch == 0 {
                    bad("map_elites.batch_size", "batch sizes must be positive".into());
                }
                if !(c.sigma_iso >= 0.0 && c.sigma_line >= 0.0) {
                    bad("map_elites.sigma_iso", "sigmas must be non-negative".into());
                }
            }
            Method::PgaMapElites | Method::PgaAurora => {
                let c = &self.pga;
                if c.batch_size == 0 || c.init_batch == 0 {
                    bad("pga.batch_size", "batch sizes must be positive".into());
                }
                if !(0.0..=1.0).contains(&c.pg_proportion) {
                    bad("pga.pg_proportion", "must lie in [0, 1]".into());
                }
                if c.td3.batch_size == 0 || c.td3.buffer_capacity == 0 {
                    bad("pga.td3.batch_size", "batch and buffer sizes must be positive".into());
                }
            }
            _ => {
                if let Err(e) = self.skill.validate() {
                    bad("skill", e.to_string());
                }
            }
        }
        if matches!(self.method, Method::Aurora | Method::PgaAurora) {
            let a = &self.aurora;
            if a.latent_dim == 0 || a.archive_budget == 0 || a.train_batch == 0 {
                bad("aurora.latent_dim", "latent_dim, archive_budget and train_batch must be positive".into());
            }
            if !(a.l0 > 0.0) {
                bad("aurora.l0", "must be positive".into());
            }
        }
        if self.adapt.points == 0 || self.adapt.n_eval == 0 {
            bad("adapt.points", "points and n_eval must be positive".into());
        }
        if !(self.adapt.lo > 0.0 && self.adapt.hi >= self.adapt.lo) {
            bad("adapt.lo", "need 0 < lo <= hi for a log grid".into());
        }
        if let Err(e) = self.hier.ppo.validate() {
            bad("hier.ppo", e.to_string());
        }
        if self.smerl.seeds == 0 {
            bad("smerl.seeds", "must be positive".into());
        }
        if self.sweep.seeds == 0 {
            bad("sweep.seeds", "must be positive".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }

    /// The environment the run trains in.
    pub fn env_spec(&self) -> Result<EnvSpec, String> {
        if self.env_file.is_empty() {
            let kind = EnvKind::from_id(&self.env).ok_or_else(|| {
                let known: Vec<&str> = EnvKind::ALL.iter().map(|k| k.id()).collect();
                format!("unknown environment {:?}; known: {}", self.env, known.join(", "))
            })?;
            Ok(EnvSpec::shipped(kind))
        } else {
            let text = std::fs::read_to_string(&self.env_file).map_err(|e| format!("{}: {e}", self.env_file))?;
            let spec = EnvSpec::from_toml(&text).map_err(|e| e.to_string())?;
            if spec.kind.id() != self.env {
                return Err(format!(
                    "env_file describes {} but env = {:?}",
                    spec.kind.id(),
                    self.env
                ));
            }
            Ok(spec)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
