//! Deterministic 2D point environments, perturbation wrappers and rollouts.
//!
//! The point moves by clipped 2D increments inside an axis-aligned arena.
//! Walls are axis-aligned segments; a move whose straight path touches a
//! wall is replaced by the first of `(dx, dy)`, `(dx, 0)`, `(0, dy)`,
//! `(0, 0)` that does not.
//!
//! Point-gait is the exception: each channel drives a leg, and the body
//! only moves forwards through stance pushes (see `EnvSpec::stride`).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const ACTION_DIM: usize = 2;
/// Number of evenly spaced positions kept in a trajectory summary.
pub const SUMMARY_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("non-finite action {0:?}")]
    NonFiniteAction(Vec<f64>),
    #[error("action has {got} channels, expected {ACTION_DIM}")]
    ActionDim { got: usize },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("perturbation value {value} outside [{lo}, {hi}]")]
    PerturbationRange { value: f64, lo: f64, hi: f64 },
    #[error("target {0:?} lies outside the arena")]
    TargetOutsideArena([f64; 2]),
    #[error("{0} has no target to move")]
    NoTarget(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PointMaze,
    PointTrap,
    PointOmni,
    PointGait,
    PointHurdle,
}

impl EnvKind {
    pub const ALL: [EnvKind; 5] = [
        EnvKind::PointMaze,
        EnvKind::PointTrap,
        EnvKind::PointOmni,
        EnvKind::PointGait,
        EnvKind::PointHurdle,
    ];

    pub fn id(self) -> &'static str {
        match self {
            EnvKind::PointMaze => "point-maze",
            EnvKind::PointTrap => "point-trap",
            EnvKind::PointOmni => "point-omni",
            EnvKind::PointGait => "point-gait",
            EnvKind::PointHurdle => "point-hurdle",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == id)
    }

    /// Whether the descriptor is the final position (a positional prior exists).
    pub fn has_position_prior(self) -> bool {
        !matches!(self, EnvKind::PointGait)
    }

    fn shipped_layout(self) -> &'static str {
        match self {
            EnvKind::PointMaze => include_str!("../envs/point-maze.toml"),
            EnvKind::PointTrap => include_str!("../envs/point-trap.toml"),
            EnvKind::PointOmni => include_str!("../envs/point-omni.toml"),
            EnvKind::PointGait => include_str!("../envs/point-gait.toml"),
            EnvKind::PointHurdle => include_str!("../envs/point-hurdle.toml"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HurdleSpec {
    pub spacing: f64,
    pub width: f64,
    /// Jump channel activation, as a fraction of the action bound.
    pub jump_threshold: f64,
    /// x-speed multiplier while jumping.
    pub jump_speed: f64,
}

impl Default for HurdleSpec {
    fn default() -> Self {
        Self {
            spacing: 3.0,
            width: 0.25,
            jump_threshold: 0.5,
            jump_speed: 0.5,
        }
    }
}

fn default_scale() -> [f64; 2] {
    [1.0, 1.0]
}
fn default_energy() -> f64 {
    0.01
}
fn default_jitter() -> f64 {
    1e-3
}
fn default_period() -> usize {
    10
}
fn default_stride() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub horizon: usize,
    pub action_bound: f64,
    /// `[x_min, y_min, x_max, y_max]`
    pub arena: [f64; 4],
    /// Segments `[x1, y1, x2, y2]`.
    #[serde(default)]
    pub walls: Vec<[f64; 4]>,
    #[serde(default)]
    pub target: Option<[f64; 2]>,
    #[serde(default = "default_scale")]
    pub dynamics_scale: [f64; 2],
    #[serde(default)]
    pub drift: [f64; 2],
    #[serde(default = "default_energy")]
    pub energy_coef: f64,
    #[serde(default = "default_jitter")]
    pub start_jitter: f64,
    /// Phase period of the clock features in point-gait observations.
    #[serde(default = "default_period")]
    pub gait_period: usize,
    /// A channel counts as active when its action is strictly above this.
    #[serde(default)]
    pub gait_threshold: f64,
    /// Point-gait legs reach this far ahead of and behind the body.
    #[serde(default = "default_stride")]
    pub stride: f64,
    #[serde(default)]
    pub hurdles: HurdleSpec,
}

impl EnvSpec {
    /// The layout shipped with the crate for `kind`.
    pub fn shipped(kind: EnvKind) -> Self {
        let spec: EnvSpec =
            toml::from_str(kind.shipped_layout()).expect("shipped layouts are valid");
        spec.validate().expect("shipped layouts are valid");
        spec
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let spec: EnvSpec =
            toml::from_str(text).map_err(|e| EnvError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidSpec(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return bad("action_bound must be positive");
        }
        let [x0, y0, x1, y1] = self.arena;
        if !(x1 > x0 && y1 > y0) || self.arena.iter().any(|v| !v.is_finite()) {
            return bad("arena must have positive area");
        }
        if !(x0..=x1).contains(&0.0) || !(y0..=y1).contains(&0.0) {
            return bad("arena must contain the origin");
        }
        if self.dynamics_scale.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("dynamics_scale entries must be >= 0");
        }
        if self.drift.iter().any(|d| !d.is_finite()) || !(self.energy_coef >= 0.0) {
            return bad("drift and energy_coef must be finite, energy_coef >= 0");
        }
        if !(self.start_jitter >= 0.0 && self.start_jitter <= 1e-3) {
            return bad("start_jitter must lie in [0, 1e-3]");
        }
        if self.walls.iter().flatten().any(|v| !v.is_finite()) {
            return bad("wall coordinates must be finite");
        }
        if let Some(t) = self.target {
            if !self.inside(t) {
                return Err(EnvError::TargetOutsideArena(t));
            }
        }
        if self.kind == EnvKind::PointMaze && self.target.is_none() {
            return bad("point-maze needs a target");
        }
        if self.kind == EnvKind::PointGait && (self.gait_period == 0 || !(self.stride > 0.0 && self.stride.is_finite())) {
            return bad("gait_period and stride must be positive");
        }
        let h = &self.hurdles;
        if !(h.spacing > h.width && h.width > 0.0 && h.jump_speed > 0.0 && h.jump_threshold >= 0.0) {
            return bad("hurdle spacing must exceed a positive width; jump_speed > 0");
        }
        Ok(())
    }

    pub fn inside(&self, p: [f64; 2]) -> bool {
        let [x0, y0, x1, y1] = self.arena;
        p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointGait => 6,
            EnvKind::PointHurdle => 3,
            _ => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn descriptor_dim(&self) -> usize {
        2
    }

    /// Box containing every descriptor this environment can emit.
    pub fn descriptor_bounds(&self) -> Bounds {
        match self.kind {
            EnvKind::PointGait => Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]),
            _ => Bounds::new(
                vec![self.arena[0], self.arena[1]],
                vec![self.arena[2], self.arena[3]],
            ),
        }
    }

    pub fn arena_diagonal(&self) -> f64 {
        let [x0, y0, x1, y1] = self.arena;
        (x1 - x0).hypot(y1 - y0)
    }

    /// A value every episode's fitness is guaranteed to stay above.
    pub fn fitness_lower_bound(&self) -> f64 {
        let t = self.horizon as f64;
        match self.kind {
            EnvKind::PointMaze => -t * self.arena_diagonal(),
            _ => {
                let max_scale = self.dynamics_scale.iter().cloned().fold(0.0, f64::max);
                let energy = self.energy_coef * self.dynamics_scale.iter().map(|s| s * s).sum::<f64>();
                let dx = self.action_bound * max_scale + self.drift[0].abs();
                let progress = match self.kind {
                    EnvKind::PointOmni => 0.0,
                    // Stance pushes never move the body backwards.
                    EnvKind::PointGait => (-self.drift[0]).max(0.0),
                    _ => dx,
                };
                -t * (progress + energy)
            }
        }
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let mut pos = [0.0, 0.0];
        if self.start_jitter > 0.0 {
            let mut r = rng::stream(seed, &[rng::tag::INIT]);
            for p in &mut pos {
                *p = r.random_range(-self.start_jitter..=self.start_jitter);
            }
        }
        EnvState { pos, t: 0, feet: [0.0; 2] }
    }

    pub fn observe(&self, state: &EnvState, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&state.pos);
        match self.kind {
            EnvKind::PointGait => {
                let phase = std::f64::consts::TAU * (state.t % self.gait_period) as f64
                    / self.gait_period as f64;
                out.push(phase.sin());
                out.push(phase.cos());
                out.extend(state.feet.iter().map(|u| u / self.stride));
            }
            EnvKind::PointHurdle => out.push(self.distance_to_next_hurdle(state.pos[0])),
            _ => {}
        }
    }

    pub fn observation(&self, state: &EnvState) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.obs_dim());
        self.observe(state, &mut v);
        v
    }

    fn distance_to_next_hurdle(&self, x: f64) -> f64 {
        let h = &self.hurdles;
        let k = (x / h.spacing).floor();
        if k >= 1.0 && x <= k * h.spacing + h.width {
            return 0.0;
        }
        (k + 1.0).max(1.0) * h.spacing - x
    }

    fn crosses_hurdle(&self, x_from: f64, x_to: f64) -> bool {
        let h = &self.hurdles;
        let (lo, hi) = if x_from <= x_to { (x_from, x_to) } else { (x_to, x_from) };
        let first = ((lo - h.width) / h.spacing).ceil().max(1.0);
        let start = first * h.spacing;
        start <= hi
    }

    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if action.len() != ACTION_DIM {
            return Err(EnvError::ActionDim { got: action.len() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction(action.to_vec()));
        }
        let b = self.action_bound;
        let clipped = [action[0].clamp(-b, b), action[1].clamp(-b, b)];
        let eff = [
            clipped[0] * self.dynamics_scale[0],
            clipped[1] * self.dynamics_scale[1],
        ];
        let energy = self.energy_coef * ((eff[0] / b).powi(2) + (eff[1] / b).powi(2));

        let active = [clipped[0] > self.gait_threshold, clipped[1] > self.gait_threshold];
        let mut feet = state.feet;
        let (disp, jumping) = match self.kind {
            EnvKind::PointGait => ([self.gait_push(&mut feet, eff, active) + self.drift[0], 0.0], false),
            EnvKind::PointHurdle => {
                let jumping = eff[1] > self.hurdles.jump_threshold * b;
                let speed = if jumping { self.hurdles.jump_speed } else { 1.0 };
                ([eff[0] * speed + self.drift[0], self.drift[1]], jumping)
            }
            _ => ([eff[0] + self.drift[0], eff[1] + self.drift[1]], false),
        };
        let pos = self.resolve_move(state.pos, disp, jumping);
        let dx = pos[0] - state.pos[0];
        let reward = match self.kind {
            EnvKind::PointMaze => {
                let t = self.target.expect("validated");
                -(pos[0] - t[0]).hypot(pos[1] - t[1])
            }
            EnvKind::PointOmni => -energy,
            EnvKind::PointTrap | EnvKind::PointGait | EnvKind::PointHurdle => dx - energy,
        };
        let t = state.t + 1;
        Ok(StepOutcome {
            state: EnvState { pos, t, feet },
            reward,
            done: t >= self.horizon,
            terminal: false,
            clipped,
            active,
        })
    }

    /// Two-legged stroke model. An active leg is in stance: its foot stays
    /// planted and the body advances by the strongest stance push, limited
    /// by how far the foot can still travel backwards. An inactive leg
    /// swings its foot forwards by the action magnitude less the gravity
    /// pull. Foot offsets live in `[-stride, stride]`.
    fn gait_push(&self, feet: &mut [f64; 2], eff: [f64; 2], active: [bool; 2]) -> f64 {
        let l = self.stride;
        let gravity = (-self.drift[1]).max(0.0);
        let push = (0..2)
            .filter(|&i| active[i])
            .map(|i| eff[i].min(feet[i] + l).max(0.0))
            .fold(0.0, f64::max);
        for i in 0..2 {
            feet[i] = if active[i] {
                (feet[i] - push).max(-l)
            } else {
                (feet[i] + (eff[i].abs() - gravity).max(0.0)).min(l)
            };
        }
        push
    }

    fn resolve_move(&self, from: [f64; 2], disp: [f64; 2], jumping: bool) -> [f64; 2] {
        let [x0, y0, x1, y1] = self.arena;
        let candidates = [[disp[0], disp[1]], [disp[0], 0.0], [0.0, disp[1]]];
        for [dx, dy] in candidates {
            let to = [(from[0] + dx).clamp(x0, x1), (from[1] + dy).clamp(y0, y1)];
            if to == from {
                continue;
            }
            if self.kind == EnvKind::PointHurdle
                && !jumping
                && to[0] != from[0]
                && self.crosses_hurdle(from[0], to[0])
            {
                continue;
            }
            if self.walls.iter().any(|w| segments_intersect(from, to, *w)) {
                continue;
            }
            return to;
        }
        from
    }

    /// True when the move `from -> to` touches any wall.
    pub fn move_hits_wall(&self, from: [f64; 2], to: [f64; 2]) -> bool {
        self.walls.iter().any(|w| segments_intersect(from, to, *w))
    }
}

/// Closed segment intersection (touching counts).
pub fn segments_intersect(p: [f64; 2], q: [f64; 2], wall: [f64; 4]) -> bool {
    let a = [wall[0], wall[1]];
    let b = [wall[2], wall[3]];
    let orient = |o: [f64; 2], u: [f64; 2], v: [f64; 2]| {
        let c = (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0]);
        if c > 0.0 {
            1
        } else if c < 0.0 {
            -1
        } else {
            0
        }
    };
    let on_segment = |o: [f64; 2], u: [f64; 2], v: [f64; 2]| {
        v[0] >= o[0].min(u[0]) && v[0] <= o[0].max(u[0]) && v[1] >= o[1].min(u[1]) && v[1] <= o[1].max(u[1])
    };
    let d1 = orient(p, q, a);
    let d2 = orient(p, q, b);
    let d3 = orient(a, b, p);
    let d4 = orient(a, b, q);
    if d1 * d2 < 0 && d3 * d4 < 0 {
        return true;
    }
    (d1 == 0 && on_segment(p, q, a))
        || (d2 == 0 && on_segment(p, q, b))
        || (d3 == 0 && on_segment(a, b, p))
        || (d4 == 0 && on_segment(a, b, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Clips in place; returns whether anything changed.
    pub fn clip(&self, p: &mut [f64]) -> bool {
        let mut changed = false;
        for (v, (lo, hi)) in p.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                *v = c;
                changed = true;
            }
        }
        changed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub t: usize,
    /// Point-gait foot offsets relative to the body; zero elsewhere.
    #[serde(default)]
    pub feet: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// Horizon reached.
    pub done: bool,
    /// True terminal state (none of the point tasks has one).
    pub terminal: bool,
    pub clipped: [f64; 2],
    /// Per-channel activity bits used by the gait descriptor.
    pub active: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub terminal: bool,
    pub aux: [bool; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub fitness: f64,
    pub descriptor: Vec<f64>,
    /// Positions at [`SUMMARY_POINTS`] evenly spaced steps, flattened.
    pub summary: Vec<f64>,
}

/// Fitness, descriptor and summary without the per-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fitness: f64,
    pub descriptor: Vec<f64>,
    pub summary: Vec<f64>,
    pub steps: usize,
}

/// A deterministic map from observation to action.
pub trait Policy: Sync {
    fn act(&self, obs: &[f64], action: &mut [f64]);
}

impl<F> Policy for F
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn act(&self, obs: &[f64], action: &mut [f64]) {
        self(obs, action)
    }
}

fn summary_indices(horizon: usize) -> [usize; SUMMARY_POINTS] {
    let mut idx = [0; SUMMARY_POINTS];
    for (i, v) in idx.iter_mut().enumerate() {
        *v = (i * (horizon - 1) + (SUMMARY_POINTS - 1) / 2) / (SUMMARY_POINTS - 1);
    }
    idx
}

fn run_episode<P: Policy + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    seed: u64,
    mut record: Option<&mut Vec<Transition>>,
) -> Result<Evaluation, EnvError> {
    let mut state = spec.reset(seed);
    let mut obs = Vec::with_capacity(spec.obs_dim());
    let mut next_obs = Vec::with_capacity(spec.obs_dim());
    spec.observe(&state, &mut obs);
    let mut action = [0.0; ACTION_DIM];
    let mut fitness = 0.0;
    let mut active = [0usize; ACTION_DIM];
    let idx = summary_indices(spec.horizon);
    let mut summary = Vec::with_capacity(2 * SUMMARY_POINTS);
    let mut next_summary = 0;
    let mut steps = 0;
    while steps < spec.horizon {
        policy.act(&obs, &mut action);
        let out = spec.step(&state, &action)?;
        fitness += out.reward;
        for (c, a) in active.iter_mut().zip(out.active) {
            *c += usize::from(a);
        }
        while next_summary < SUMMARY_POINTS && idx[next_summary] == steps {
            summary.extend_from_slice(&out.state.pos);
            next_summary += 1;
        }
        spec.observe(&out.state, &mut next_obs);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Transition {
                state: obs.clone(),
                action: out.clipped.to_vec(),
                next_state: next_obs.clone(),
                reward: out.reward,
                done: out.done,
                terminal: out.terminal,
                aux: out.active,
            });
        }
        std::mem::swap(&mut obs, &mut next_obs);
        state = out.state;
        steps += 1;
        if out.done || out.terminal {
            break;
        }
    }
    let mut descriptor = match spec.kind {
        EnvKind::PointGait => active.iter().map(|&c| c as f64 / steps as f64).collect(),
        _ => state.pos.to_vec(),
    };
    spec.descriptor_bounds().clip(&mut descriptor);
    Ok(Evaluation {
        fitness,
        descriptor,
        summary,
        steps,
    })
}

/// Runs one episode and records every transition.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    seed: u64,
) -> Result<Trajectory, EnvError> {
    let mut transitions = Vec::with_capacity(spec.horizon);
    let eval = run_episode(policy, spec, seed, Some(&mut transitions))?;
    Ok(Trajectory {
        transitions,
        fitness: eval.fitness,
        descriptor: eval.descriptor,
        summary: eval.summary,
    })
}

/// Runs one episode keeping only fitness, descriptor and summary.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    seed: u64,
) -> Result<Evaluation, EnvError> {
    run_episode(policy, spec, seed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Perturbation {
    /// Multiplies the input-to-displacement coefficient of the listed channels.
    DynamicsScale { channels: Vec<usize>, factor: f64 },
    /// Multiplies the drift vector (gravity analogue).
    DriftScale { factor: f64 },
    MoveTarget { target: [f64; 2] },
}

pub const DYNAMICS_SCALE_RANGE: (f64, f64) = (0.0, 4.5);
pub const DRIFT_SCALE_RANGE: (f64, f64) = (0.25, 50.0);

pub fn apply_perturbation(spec: &EnvSpec, p: &Perturbation) -> Result<EnvSpec, EnvError> {
    let in_range = |v: f64, (lo, hi): (f64, f64)| {
        if v.is_finite() && v >= lo && v <= hi {
            Ok(())
        } else {
            Err(EnvError::PerturbationRange { value: v, lo, hi })
        }
    };
    let mut out = spec.clone();
    match p {
        Perturbation::DynamicsScale { channels, factor } => {
            in_range(*factor, DYNAMICS_SCALE_RANGE)?;
            for &c in channels {
                if c >= ACTION_DIM {
                    return Err(EnvError::ActionDim { got: c + 1 });
                }
                out.dynamics_scale[c] *= factor;
            }
        }
        Perturbation::DriftScale { factor } => {
            in_range(*factor, DRIFT_SCALE_RANGE)?;
            for d in &mut out.drift {
                *d *= factor;
            }
        }
        Perturbation::MoveTarget { target } => {
            if spec.target.is_none() {
                return Err(EnvError::NoTarget(spec.kind.id()));
            }
            if !spec.inside(*target) {
                return Err(EnvError::TargetOutsideArena(*target));
            }
            out.target = Some(*target);
        }
    }
    Ok(out)
}
