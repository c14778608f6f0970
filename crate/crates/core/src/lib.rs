//! Quality-diversity and mutual-information skill discovery on
//! deterministic 2D point environments.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: fixed-topology MLPs with exact reverse-mode gradients and Adam.
//! * [`envs`]: point environments, perturbation wrappers and rollouts.
//! * [`repertoire`]: CVT repertoires, the unstructured archive and QD metrics.
//! * [`variation`]: uniform selection and Iso+LineDD.
//! * [`policy`]: deterministic policies over genotypes.
//! * [`qd`]: MAP-Elites, PGA-MAP-Elites and AURORA loops.
//! * [`skill_rl`]: SAC with DIAYN, DADS, SMERL and reward shaping.
//! * [`eval`]: adaptation, hierarchical control and sweep protocols.
//! * [`harness`]: configs, runs, checkpoints and exports.
//! * [`rng`]: seed derivation shared by every stochastic component.

pub mod envs;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod qd;
pub mod repertoire;
pub mod rng;
pub mod skill_rl;
pub mod variation;
