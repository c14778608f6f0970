//! DIAYN discriminator and DADS skill-dynamics model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dads_reward, diayn_reward};
use crate::nn::{log_softmax, softmax, Activation, Adam, Genotype, NetSpec, NnError, OutputHead};

/// Categorical classifier `q(z | features)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: NetSpec,
    pub net: Genotype,
    opt: Adam,
    pub num_skills: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        num_skills: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let spec = NetSpec::mlp(feature_dim, hidden, num_skills, Activation::Relu, OutputHead::CategoricalLogits)?;
        let net = Genotype::random(&spec, rng);
        Ok(Self {
            opt: Adam::new(net.len(), lr),
            spec,
            net,
            num_skills,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// `batch x num_skills` class probabilities.
    pub fn probs(&self, features: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        let tape = self.spec.forward_batch(&self.net.params, features, batch)?;
        Ok(tape.output().chunks_exact(self.num_skills).flat_map(softmax).collect())
    }

    /// DIAYN reward of one state's features under skill `z`.
    pub fn reward(&self, features: &[f64], z: usize) -> Result<f64, NnError> {
        let p = self.probs(features, 1)?;
        Ok(diayn_reward(p[z], self.num_skills))
    }

    pub fn rewards(&self, features: &[f64], skills: &[u32]) -> Result<Vec<f64>, NnError> {
        let p = self.probs(features, skills.len())?;
        Ok(p.chunks_exact(self.num_skills)
            .zip(skills)
            .map(|(row, &z)| diayn_reward(row[z as usize], self.num_skills))
            .collect())
    }

    /// One Adam step on the mean cross-entropy; returns the loss before it.
    pub fn train_step(&mut self, features: &[f64], skills: &[u32]) -> Result<f64, NnError> {
        let b = skills.len();
        let tape = self.spec.forward_batch(&self.net.params, features, b)?;
        let k = self.num_skills;
        let mut up = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (row, &z) in tape.output().chunks_exact(k).zip(skills) {
            let lp = log_softmax(row);
            loss -= lp[z as usize];
            for (j, l) in lp.iter().enumerate() {
                let target = if j == z as usize { 1.0 } else { 0.0 };
                up.push((l.exp() - target) / b as f64);
            }
        }
        let mut grad = vec![0.0; self.net.len()];
        self.spec.backward_batch(&self.net.params, &tape, &up, &mut grad)?;
        self.opt.step(&mut self.net, &grad)?;
        Ok(loss / b as f64)
    }
}

/// Welford running mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *s += d * (v - *m);
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|s| if self.count > 1.0 { (s / self.count).sqrt().max(1e-6) } else { 1.0 })
            .collect()
    }

    pub fn normalize(&self, x: &[f64], out: &mut Vec<f64>) {
        let std = self.std();
        for ((v, m), s) in x.iter().zip(&self.mean).zip(&std) {
            out.push((v - m) / s);
        }
    }
}

/// Skill dynamics `q(ds | z)`: a mixture of unit-covariance gaussians over
/// the normalised feature increment, parameterised by a net on `onehot(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDynamics {
    pub spec: NetSpec,
    pub net: Genotype,
    opt: Adam,
    pub num_skills: usize,
    pub dim: usize,
    pub components: usize,
    pub norm: RunningNorm,
}

struct Mixture<'a> {
    out: &'a [f64],
    components: usize,
    dim: usize,
}

impl Mixture<'_> {
    /// `(log mixture density, per-component log weight + log kernel)`.
    fn log_density(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.components;
        let log_w = log_softmax(&self.out[..k]);
        let c = 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = (0..k)
            .map(|j| {
                let m = &self.out[k + j * self.dim..k + (j + 1) * self.dim];
                let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                log_w[j] - 0.5 * d2 - c
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        (lse, terms)
    }
}

impl SkillDynamics {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_skills: usize,
        components: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let spec = NetSpec::mlp(num_skills, hidden, components * (1 + dim), Activation::Relu, OutputHead::Linear)?;
        let net = Genotype::random(&spec, rng);
        Ok(Self {
            opt: Adam::new(net.len(), lr),
            spec,
            net,
            num_skills,
            dim,
            components,
            norm: RunningNorm::new(dim),
        })
    }

    fn onehots(&self, skills: &[u32]) -> Vec<f64> {
        let mut x = vec![0.0; skills.len() * self.num_skills];
        for (i, &z) in skills.iter().enumerate() {
            x[i * self.num_skills + z as usize] = 1.0;
        }
        x
    }

    /// Mixture parameters of every skill, row `z`.
    fn table(&self) -> Result<Vec<f64>, NnError> {
        let all: Vec<u32> = (0..self.num_skills as u32).collect();
        Ok(self.spec.forward_batch(&self.net.params, &self.onehots(&all), self.num_skills)?.output().to_vec())
    }

    /// `batch x num_skills` log densities of raw increments `deltas`.
    pub fn log_densities(&self, deltas: &[f64]) -> Result<Vec<f64>, NnError> {
        let table = self.table()?;
        let w = self.spec.output_dim();
        let mut out = Vec::with_capacity(deltas.len() / self.dim * self.num_skills);
        let mut x = Vec::with_capacity(self.dim);
        for d in deltas.chunks_exact(self.dim) {
            x.clear();
            self.norm.normalize(d, &mut x);
            for z in 0..self.num_skills {
                let mix = Mixture { out: &table[z * w..(z + 1) * w], components: self.components, dim: self.dim };
                out.push(mix.log_density(&x).0);
            }
        }
        Ok(out)
    }

    /// DADS reward of one increment under skill `z`.
    pub fn reward(&self, s: &[f64], s_next: &[f64], z: usize) -> Result<f64, NnError> {
        let delta: Vec<f64> = s_next.iter().zip(s).map(|(a, b)| a - b).collect();
        Ok(dads_reward(&self.log_densities(&delta)?, z))
    }

    pub fn rewards(&self, deltas: &[f64], skills: &[u32]) -> Result<Vec<f64>, NnError> {
        let l = self.log_densities(deltas)?;
        Ok(l.chunks_exact(self.num_skills).zip(skills).map(|(row, &z)| dads_reward(row, z as usize)).collect())
    }

    /// Mean negative log-likelihood of `deltas` under their skills, with the
    /// current normaliser.
    pub fn nll(&self, deltas: &[f64], skills: &[u32]) -> Result<f64, NnError> {
        let l = self.log_densities(deltas)?;
        Ok(-l.chunks_exact(self.num_skills).zip(skills).map(|(row, &z)| row[z as usize]).sum::<f64>()
            / skills.len() as f64)
    }

    /// Updates the normaliser with the batch, then takes one Adam step on the
    /// mean negative log-likelihood. Returns the loss before the step.
    pub fn train_step(&mut self, deltas: &[f64], skills: &[u32]) -> Result<f64, NnError> {
        for d in deltas.chunks_exact(self.dim) {
            self.norm.update(d);
        }
        let b = skills.len();
        let tape = self.spec.forward_batch(&self.net.params, &self.onehots(skills), b)?;
        let (k, dim) = (self.components, self.dim);
        let w = self.spec.output_dim();
        let mut up = vec![0.0; b * w];
        let mut loss = 0.0;
        let mut x = Vec::with_capacity(dim);
        for (i, d) in deltas.chunks_exact(dim).enumerate() {
            x.clear();
            self.norm.normalize(d, &mut x);
            let out = &tape.output()[i * w..(i + 1) * w];
            let mix = Mixture { out, components: k, dim };
            let (lse, terms) = mix.log_density(&x);
            loss -= lse;
            let weights = softmax(&out[..k]);
            let g = &mut up[i * w..(i + 1) * w];
            for j in 0..k {
                let resp = (terms[j] - lse).exp();
                g[j] = (weights[j] - resp) / b as f64;
                let m = &out[k + j * dim..k + (j + 1) * dim];
                for c in 0..dim {
                    g[k + j * dim + c] = -resp * (x[c] - m[c]) / b as f64;
                }
            }
        }
        let mut grad = vec![0.0; self.net.len()];
        self.spec.backward_batch(&self.net.params, &tape, &up, &mut grad)?;
        self.opt.step(&mut self.net, &grad)?;
        Ok(loss / b as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discriminator_separates_clusters() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut disc = Discriminator::new(2, 2, &[32, 32], 3e-4, &mut r).unwrap();
        let sample = |r: &mut ChaCha8Rng, n: usize| {
            let mut f = Vec::new();
            let mut z = Vec::new();
            for _ in 0..n {
                let k: u32 = r.random_range(0..2);
                let c = if k == 0 { -1.0 } else { 1.0 };
                f.push(c + r.random_range(-0.3..0.3));
                f.push(r.random_range(-0.3..0.3));
                z.push(k);
            }
            (f, z)
        };
        for _ in 0..2000 {
            let (f, z) = sample(&mut r, 64);
            disc.train_step(&f, &z).unwrap();
        }
        let (f, z) = sample(&mut r, 1000);
        let p = disc.probs(&f, 1000).unwrap();
        let correct = p.chunks_exact(2).zip(&z).filter(|(row, &k)| row[k as usize] > 0.5).count();
        assert!(correct > 950, "{correct}");
        assert!(p.chunks_exact(2).all(|row| (row[0] + row[1] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_class_cross_entropy_vanishes() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut disc = Discriminator::new(2, 1, &[8], 3e-4, &mut r).unwrap();
        let loss = disc.train_step(&[0.3, 0.4, -1.0, 2.0], &[0, 0]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn running_norm_matches_batch_statistics() {
        let mut n = RunningNorm::new(1);
        for v in [1.0, 2.0, 3.0, 4.0] {
            n.update(&[v]);
        }
        assert!((n.mean[0] - 2.5).abs() < 1e-12);
        assert!((n.std()[0] - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dynamics_nll_decreases_on_fixed_data() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut dyn_ = SkillDynamics::new(2, 3, 4, &[32, 32], 3e-4, &mut r).unwrap();
        let per_skill = [[0.1, 0.0], [0.0, 0.1], [-0.1, -0.1]];
        let mut deltas = Vec::new();
        let mut skills = Vec::new();
        for i in 0..90 {
            let z = i % 3;
            deltas.extend_from_slice(&per_skill[z]);
            skills.push(z as u32);
        }
        // Warm the normaliser so that the measured objective is fixed.
        for _ in 0..50 {
            for d in deltas.chunks_exact(2) {
                dyn_.norm.update(d);
            }
        }
        let mut prev = dyn_.nll(&deltas, &skills).unwrap();
        let mut violations = 0;
        let epochs = 300;
        for _ in 0..epochs {
            dyn_.train_step(&deltas, &skills).unwrap();
            let cur = dyn_.nll(&deltas, &skills).unwrap();
            violations += usize::from(cur > prev);
            prev = cur;
        }
        assert!(violations * 20 <= epochs, "{violations}");
        let l = dyn_.log_densities(&deltas[..2]).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(dyn_.reward(&[0.0, 0.0], &per_skill[0], 0).unwrap() > 0.5);
    }
}
