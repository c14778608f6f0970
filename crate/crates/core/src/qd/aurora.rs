//! AURORA: descriptors learned by an autoencoder over trajectory summaries,
//! stored in an unstructured archive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    evaluate_all, ga_children, initial_population, pga_children, rollout_all, GaConfig, PgaConfig, PgaLearner,
    QdError,
};
use crate::envs::{EnvSpec, SUMMARY_POINTS};
use crate::nn::{Activation, Adam, Genotype, NetSpec, OutputHead};
use crate::repertoire::{ArchiveEntry, CvtRepertoire, QdMetrics, UnstructuredArchive};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuroraConfig {
    pub latent_dim: usize,
    /// Initial distance threshold of the archive.
    pub l0: f64,
    pub archive_budget: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub train_steps: usize,
    pub train_batch: usize,
    /// First retraining iteration; later ones follow a geometric schedule.
    pub retrain_first: u64,
    pub retrain_ratio: u64,
}

impl Default for AuroraConfig {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            l0: 0.2,
            archive_budget: 1024,
            hidden: vec![64],
            lr: 1e-3,
            train_steps: 300,
            train_batch: 128,
            retrain_first: 10,
            retrain_ratio: 2,
        }
    }
}

impl AuroraConfig {
    /// True at iterations `first * ratio^k`.
    pub fn is_retrain_iteration(&self, iteration: u64) -> bool {
        let mut at = self.retrain_first.max(1);
        let ratio = self.retrain_ratio.max(2);
        while at < iteration {
            at = match at.checked_mul(ratio) {
                Some(v) => v,
                None => return false,
            };
        }
        at == iteration
    }
}

/// Feed-forward autoencoder on standardised trajectory summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder_spec: NetSpec,
    pub decoder_spec: NetSpec,
    pub encoder: Genotype,
    pub decoder: Genotype,
    opt_encoder: Adam,
    opt_decoder: Adam,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub last_loss: Option<f64>,
    pub trainings: u64,
}

const STD_FLOOR: f64 = 1e-6;

impl Autoencoder {
    pub fn new(input_dim: usize, cfg: &AuroraConfig, seed: u64) -> Result<Self, QdError> {
        let encoder_spec = NetSpec::mlp(input_dim, &cfg.hidden, cfg.latent_dim, Activation::Relu, OutputHead::Linear)?;
        let hidden_rev: Vec<usize> = cfg.hidden.iter().rev().cloned().collect();
        let decoder_spec = NetSpec::mlp(cfg.latent_dim, &hidden_rev, input_dim, Activation::Relu, OutputHead::Linear)?;
        let mut r = rng::stream(seed, &[tag::INIT, tag::AUTOENCODER]);
        let encoder = Genotype::random(&encoder_spec, &mut r);
        let decoder = Genotype::random(&decoder_spec, &mut r);
        Ok(Self {
            opt_encoder: Adam::new(encoder.len(), cfg.lr),
            opt_decoder: Adam::new(decoder.len(), cfg.lr),
            encoder_spec,
            decoder_spec,
            encoder,
            decoder,
            mean: vec![0.0; input_dim],
            std: vec![1.0; input_dim],
            last_loss: None,
            trainings: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn normalized(&self, data: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(data.len() * self.input_dim());
        for row in data {
            for ((x, m), s) in row.iter().zip(&self.mean).zip(&self.std) {
                out.push((x - m) / s);
            }
        }
        out
    }

    pub fn encode(&self, summary: &[f64]) -> Result<Vec<f64>, QdError> {
        let x: Vec<f64> = summary
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect();
        Ok(self.encoder_spec.forward(&self.encoder.params, &x)?)
    }

    /// Mean squared reconstruction error per coordinate.
    pub fn reconstruction_loss(&self, data: &[Vec<f64>]) -> Result<f64, QdError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let x = self.normalized(data);
        let n = data.len();
        let z = self.encoder_spec.forward_batch(&self.encoder.params, &x, n)?;
        let y = self.decoder_spec.forward_batch(&self.decoder.params, z.output(), n)?;
        Ok(y.output().iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
    }

    /// Refreshes the standardisation from `data` and takes `steps` Adam steps
    /// on minibatches. Returns `(loss before, loss after)` on `data`; with zero
    /// steps nothing changes.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &[Vec<f64>],
        steps: usize,
        batch: usize,
        rng: &mut R,
    ) -> Result<(f64, f64), QdError> {
        if steps == 0 || data.is_empty() {
            let l = self.reconstruction_loss(data)?;
            return Ok((l, l));
        }
        let d = self.input_dim();
        let n = data.len() as f64;
        for k in 0..d {
            let m = data.iter().map(|r| r[k]).sum::<f64>() / n;
            let v = data.iter().map(|r| (r[k] - m) * (r[k] - m)).sum::<f64>() / n;
            self.mean[k] = m;
            self.std[k] = v.sqrt().max(STD_FLOOR);
        }
        let before = self.reconstruction_loss(data)?;
        let all = self.normalized(data);
        for _ in 0..steps {
            let b = batch.min(data.len()).max(1);
            let mut x = Vec::with_capacity(b * d);
            for _ in 0..b {
                let i = rng.random_range(0..data.len());
                x.extend_from_slice(&all[i * d..(i + 1) * d]);
            }
            let zt = self.encoder_spec.forward_batch(&self.encoder.params, &x, b)?;
            let yt = self.decoder_spec.forward_batch(&self.decoder.params, zt.output(), b)?;
            let scale = 2.0 / (b * d) as f64;
            let up: Vec<f64> = yt.output().iter().zip(&x).map(|(y, x)| scale * (y - x)).collect();
            let mut gd = vec![0.0; self.decoder.len()];
            let dz = self.decoder_spec.backward_batch(&self.decoder.params, &yt, &up, &mut gd)?;
            let mut ge = vec![0.0; self.encoder.len()];
            self.encoder_spec.backward_batch(&self.encoder.params, &zt, &dz, &mut ge)?;
            self.opt_decoder.step(&mut self.decoder, &gd)?;
            self.opt_encoder.step(&mut self.encoder, &ge)?;
        }
        let after = self.reconstruction_loss(data)?;
        self.last_loss = Some(after);
        self.trainings += 1;
        Ok((before, after))
    }
}

/// AURORA state: autoencoder, archive, counters, and for PGA-AURORA the
/// critics and buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuroraState {
    pub ae: Autoencoder,
    pub archive: UnstructuredArchive,
    pub iteration: u64,
    pub env_steps: u64,
    pub pga: Option<PgaLearner>,
}

/// How children are produced.
#[derive(Debug, Clone, Copy)]
pub enum AuroraVariation<'a> {
    Genetic(&'a GaConfig),
    PolicyGradient(&'a PgaConfig),
}

impl AuroraVariation<'_> {
    fn batch_size(&self) -> usize {
        match self {
            AuroraVariation::Genetic(c) => c.batch_size,
            AuroraVariation::PolicyGradient(c) => c.batch_size,
        }
    }

    fn init_batch(&self) -> usize {
        match self {
            AuroraVariation::Genetic(c) => c.init_batch,
            AuroraVariation::PolicyGradient(c) => c.init_batch,
        }
    }
}

struct Scored {
    genotype: Genotype,
    fitness: f64,
    descriptor: Vec<f64>,
    summary: Vec<f64>,
}

impl AuroraState {
    fn insert_scored(&mut self, batch: Vec<Scored>) -> Result<usize, QdError> {
        let mut inserted = 0;
        for s in batch {
            let latent = self.ae.encode(&s.summary)?;
            let entry = ArchiveEntry {
                genotype: s.genotype,
                fitness: s.fitness,
                descriptor: latent,
                summary: s.summary,
                reference_descriptor: s.descriptor,
            };
            inserted += usize::from(self.archive.insert(entry)?.inserted());
        }
        Ok(inserted)
    }

    fn summaries(&self) -> Vec<Vec<f64>> {
        self.archive.entries.iter().map(|e| e.summary.clone()).collect()
    }

    /// Trains the autoencoder on the archive's summaries.
    pub fn train_autoencoder(&mut self, cfg: &AuroraConfig, seed: u64) -> Result<(f64, f64), QdError> {
        let data = self.summaries();
        self.train_on(&data, cfg, seed)
    }

    fn train_on(&mut self, data: &[Vec<f64>], cfg: &AuroraConfig, seed: u64) -> Result<(f64, f64), QdError> {
        let mut r = rng::stream(seed, &[tag::AUTOENCODER, self.iteration]);
        self.ae.train(data, cfg.train_steps, cfg.train_batch, &mut r)
    }

    /// Re-encodes every entry and re-filters the archive.
    pub fn recompute_descriptors(&mut self) -> Result<(), QdError> {
        for i in 0..self.archive.entries.len() {
            let d = self.ae.encode(&self.archive.entries[i].summary)?;
            self.archive.entries[i].descriptor = d;
        }
        self.archive.refilter();
        Ok(())
    }

    /// Metrics of the archive projected onto `template` via the hand-defined
    /// descriptors.
    pub fn metrics(&self, template: &CvtRepertoire, offset: f64) -> Result<QdMetrics, QdError> {
        Ok(self.archive.project(template)?.metrics(offset))
    }
}

fn score(
    genotypes: Vec<Genotype>,
    env: &EnvSpec,
    spec: &NetSpec,
    seed: u64,
    iteration: u64,
    learner: Option<&mut PgaLearner>,
) -> Result<(Vec<Scored>, u64), QdError> {
    let mut steps = 0;
    let scored = match learner {
        None => {
            let evals = evaluate_all(&genotypes, env, spec, seed, iteration)?;
            genotypes
                .into_iter()
                .zip(evals)
                .map(|(g, e)| {
                    steps += e.steps as u64;
                    Scored {
                        genotype: g,
                        fitness: e.fitness,
                        descriptor: e.descriptor,
                        summary: e.summary,
                    }
                })
                .collect()
        }
        Some(l) => {
            let trajs = rollout_all(&genotypes, env, spec, seed, iteration)?;
            l.record(&trajs, env.action_bound)?;
            genotypes
                .into_iter()
                .zip(trajs)
                .map(|(g, t)| {
                    steps += t.transitions.len() as u64;
                    Scored {
                        genotype: g,
                        fitness: t.fitness,
                        descriptor: t.descriptor,
                        summary: t.summary,
                    }
                })
                .collect()
        }
    };
    Ok((scored, steps))
}

pub fn aurora_init(
    env: &EnvSpec,
    spec: &NetSpec,
    cfg: &AuroraConfig,
    variation: AuroraVariation<'_>,
    seed: u64,
) -> Result<AuroraState, QdError> {
    let pga = match variation {
        AuroraVariation::Genetic(_) => None,
        AuroraVariation::PolicyGradient(p) => Some(PgaLearner::new(env, spec, &p.td3, seed)?),
    };
    let mut state = AuroraState {
        ae: Autoencoder::new(2 * SUMMARY_POINTS, cfg, seed)?,
        archive: UnstructuredArchive::new(cfg.l0, cfg.archive_budget),
        iteration: 0,
        env_steps: 0,
        pga,
    };
    let pop = initial_population(spec, variation.init_batch(), seed);
    let (scored, steps) = score(pop, env, spec, seed, 0, state.pga.as_mut())?;
    state.env_steps = steps;
    let data: Vec<Vec<f64>> = scored.iter().map(|s| s.summary.clone()).collect();
    state.train_on(&data, cfg, seed)?;
    state.insert_scored(scored)?;
    Ok(state)
}

/// One AURORA (or PGA-AURORA) iteration, retraining the encoder on the
/// geometric schedule.
pub fn aurora_iteration(
    state: &mut AuroraState,
    env: &EnvSpec,
    spec: &NetSpec,
    cfg: &AuroraConfig,
    variation: AuroraVariation<'_>,
    seed: u64,
) -> Result<usize, QdError> {
    let it = state.iteration + 1;
    let pool: Vec<Genotype> = state.archive.entries.iter().map(|e| e.genotype.clone()).collect();
    let n = variation.batch_size();
    let children = match variation {
        AuroraVariation::Genetic(c) => ga_children(&pool, n, &c.variation(), seed, it)?,
        AuroraVariation::PolicyGradient(c) => {
            let learner = state.pga.as_mut().expect("PGA-AURORA state carries critics");
            let mut r = rng::stream(seed, &[tag::CRITIC, it]);
            learner.td3.critic_update(&learner.buffer, c.td3.critic_steps, &c.td3, &mut r)?;
            pga_children(&pool, n, c, learner, seed, it)?
        }
    };
    let (scored, steps) = score(children, env, spec, seed, it, state.pga.as_mut())?;
    let inserted = state.insert_scored(scored)?;
    state.iteration = it;
    state.env_steps += steps;
    if cfg.is_retrain_iteration(it) {
        state.train_autoencoder(cfg, seed)?;
        state.recompute_descriptors()?;
    }
    Ok(inserted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::policy::{deterministic_spec, NetConfig};
    use crate::qd::Td3Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometric_schedule() {
        let cfg = AuroraConfig::default();
        let hits: Vec<u64> = (1..=200).filter(|&i| cfg.is_retrain_iteration(i)).collect();
        assert_eq!(hits, vec![10, 20, 40, 80, 160]);
    }

    fn random_data(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = r.random_range(-1.0..1.0);
                let b: f64 = r.random_range(-1.0..1.0);
                (0..16).map(|k| a * k as f64 / 16.0 + b * (k % 2) as f64).collect()
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = AuroraConfig::default();
        let data = random_data(0, 200);
        let mut wins = 0;
        for trial in 0..10 {
            let mut ae = Autoencoder::new(16, &cfg, trial).unwrap();
            let (before, after) = ae.train(&data, 200, 64, &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
            wins += usize::from(after < before);
        }
        assert!(wins >= 9);
    }

    #[test]
    fn constant_dataset_is_reconstructed() {
        let cfg = AuroraConfig::default();
        let data = vec![vec![0.3; 16]; 50];
        let mut ae = Autoencoder::new(16, &cfg, 4).unwrap();
        let (before, after) = ae.train(&data, 2000, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(after < 1e-3 * before, "{before} -> {after}");
        assert_eq!(ae.encode(&data[0]).unwrap().len(), 5);
    }

    #[test]
    fn zero_step_retrain_keeps_descriptors() {
        let env = EnvSpec {
            horizon: 20,
            ..EnvSpec::shipped(EnvKind::PointOmni)
        };
        let spec = deterministic_spec(&env, &NetConfig { hidden: vec![8] }).unwrap();
        let ga = GaConfig {
            batch_size: 30,
            init_batch: 30,
            ..GaConfig::default()
        };
        let cfg = AuroraConfig::default();
        let mut st = aurora_init(&env, &spec, &cfg, AuroraVariation::Genetic(&ga), 1).unwrap();
        let before = st.archive.entries.clone();
        let zero = AuroraConfig {
            train_steps: 0,
            ..cfg.clone()
        };
        st.train_autoencoder(&zero, 1).unwrap();
        st.recompute_descriptors().unwrap();
        for e in &st.archive.entries {
            let old = before.iter().find(|b| b.genotype == e.genotype).unwrap();
            assert_eq!(old.descriptor, e.descriptor);
        }
    }

    #[test]
    fn archive_stays_filtered_and_elitist() {
        let env = EnvSpec {
            horizon: 20,
            ..EnvSpec::shipped(EnvKind::PointOmni)
        };
        let spec = deterministic_spec(&env, &NetConfig { hidden: vec![8] }).unwrap();
        let ga = GaConfig {
            batch_size: 40,
            init_batch: 40,
            ..GaConfig::default()
        };
        let cfg = AuroraConfig {
            archive_budget: 50,
            train_steps: 50,
            ..AuroraConfig::default()
        };
        let mut st = aurora_init(&env, &spec, &cfg, AuroraVariation::Genetic(&ga), 2).unwrap();
        let mut best = st.archive.max_fitness().unwrap();
        for _ in 0..25 {
            let retrain = cfg.is_retrain_iteration(st.iteration + 1);
            aurora_iteration(&mut st, &env, &spec, &cfg, AuroraVariation::Genetic(&ga), 2).unwrap();
            assert!(st.archive.len() <= cfg.archive_budget);
            let m = st.archive.max_fitness().unwrap();
            if !retrain {
                assert!(m >= best);
            }
            best = m;
            if retrain {
                let e = &st.archive.entries;
                for i in 0..e.len() {
                    for j in 0..i {
                        let d: f64 = e[i].descriptor.iter().zip(&e[j].descriptor).map(|(a, b)| (a - b) * (a - b)).sum();
                        assert!(d.sqrt() > st.archive.l);
                    }
                }
            }
        }
    }

    #[test]
    fn pga_aurora_runs() {
        let env = EnvSpec {
            horizon: 20,
            ..EnvSpec::shipped(EnvKind::PointOmni)
        };
        let spec = deterministic_spec(&env, &NetConfig { hidden: vec![8] }).unwrap();
        let pga = PgaConfig {
            batch_size: 10,
            init_batch: 10,
            td3: Td3Config {
                critic_hidden: vec![8],
                batch_size: 16,
                critic_steps: 3,
                pg_steps: 2,
                ..Td3Config::default()
            },
            ..PgaConfig::default()
        };
        let cfg = AuroraConfig {
            train_steps: 10,
            ..AuroraConfig::default()
        };
        let v = AuroraVariation::PolicyGradient(&pga);
        let mut st = aurora_init(&env, &spec, &cfg, v, 3).unwrap();
        for _ in 0..3 {
            aurora_iteration(&mut st, &env, &spec, &cfg, v, 3).unwrap();
        }
        assert_eq!(st.pga.as_ref().unwrap().buffer.len(), 40 * 20);
        assert_eq!(st.env_steps, 40 * 20);
    }
}
