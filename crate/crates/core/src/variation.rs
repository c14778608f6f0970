//! Uniform selection and Iso+LineDD variation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Genotype;
use crate::repertoire::CvtRepertoire;

#[derive(Debug, Error, PartialEq)]
pub enum VariationError {
    #[error("cannot select from an empty repertoire")]
    EmptyRepertoire,
    #[error("parents belong to different network specs")]
    SpecMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationConfig {
    pub sigma_iso: f64,
    pub sigma_line: f64,
    pub batch_size: usize,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            sigma_iso: 0.005,
            sigma_line: 0.05,
            batch_size: 1000,
        }
    }
}

/// `count` draws with replacement, uniform over occupied cells.
pub fn select_uniform<R: Rng + ?Sized>(
    rep: &CvtRepertoire,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Genotype>, VariationError> {
    let occupied: Vec<usize> = rep.elites().map(|(i, _)| i).collect();
    select_from(&occupied, count, rng)
        .map(|idx| idx.into_iter().map(|i| rep.cell(i).unwrap().genotype.clone()).collect())
}

/// Uniform draws with replacement from `pool`.
pub fn select_from<T: Clone, R: Rng + ?Sized>(
    pool: &[T],
    count: usize,
    rng: &mut R,
) -> Result<Vec<T>, VariationError> {
    if pool.is_empty() {
        return Err(VariationError::EmptyRepertoire);
    }
    Ok((0..count)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect())
}

/// `x1 + sigma_iso * eps + sigma_line * (x2 - x1) * delta` with per-coordinate
/// `eps ~ N(0, 1)` and one shared scalar `delta ~ N(0, 1)`.
pub fn iso_line_dd<R: Rng + ?Sized>(
    x1: &Genotype,
    x2: &Genotype,
    cfg: &VariationConfig,
    rng: &mut R,
) -> Result<Genotype, VariationError> {
    if x1.spec_hash != x2.spec_hash || x1.len() != x2.len() {
        return Err(VariationError::SpecMismatch);
    }
    let delta: f64 = rng.sample(StandardNormal);
    let params = x1
        .params
        .iter()
        .zip(&x2.params)
        .map(|(a, b)| {
            let eps: f64 = rng.sample(StandardNormal);
            a + cfg.sigma_iso * eps + cfg.sigma_line * (b - a) * delta
        })
        .collect();
    let mut child = Genotype {
        params,
        spec_hash: x1.spec_hash,
    };
    child.quantize();
    Ok(child)
}
