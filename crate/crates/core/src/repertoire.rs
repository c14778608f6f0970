//! Elite containers and QD metrics.

use std::cmp::Ordering;

use rand::Rng;
use thiserror::Error;

use crate::envs::{self, Bounds, EnvError, EnvSpec, Policy};
use crate::nn::{Genotype, NnError};
use crate::rng;

#[derive(Debug, Error)]
pub enum RepertoireError {
    #[error("degenerate descriptor bounds: {0}")]
    DegenerateBounds(String),
    #[error("need at least one cell")]
    NoCells,
    #[error("non-finite fitness {0}")]
    NonFiniteFitness(f64),
    #[error("descriptor has {got} dimensions, expected {expected}")]
    DescriptorDim { expected: usize, got: usize },
    #[error("malformed repertoire file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Genotype(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Static kd-tree over a flat point array; nearest-neighbour ties go to the
/// lowest index.
#[derive(Debug, Clone)]
struct KdTree {
    dim: usize,
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        fn split(order: &mut [usize], points: &[f64], dim: usize, depth: usize) {
            if order.len() <= 1 {
                return;
            }
            let axis = depth % dim;
            let mid = order.len() / 2;
            order.select_nth_unstable_by(mid, |&a, &b| {
                points[a * dim + axis]
                    .total_cmp(&points[b * dim + axis])
                    .then(a.cmp(&b))
            });
            let (left, right) = order.split_at_mut(mid);
            split(left, points, dim, depth + 1);
            split(&mut right[1..], points, dim, depth + 1);
        }
        split(&mut order, points, dim, 0);
        Self { dim, order }
    }

    fn nearest(&self, points: &[f64], q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(points, q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(
        &self,
        points: &[f64],
        q: &[f64],
        lo: usize,
        hi: usize,
        depth: usize,
        best: &mut (usize, f64),
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &points[idx * self.dim..(idx + 1) * self.dim];
        let d2 = sq_dist(p, q);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = depth % self.dim;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(points, q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.1 {
            self.search(points, q, far.0, far.1, depth + 1, best);
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest point by brute force (ties to the lowest index).
pub fn nearest_brute_force(points: &[f64], dim: usize, q: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvtParams {
    pub samples_per_cell: usize,
    /// Lower bound on the sample count, so tiny tessellations are not noisy.
    pub min_samples: usize,
    pub max_iterations: usize,
}

impl Default for CvtParams {
    fn default() -> Self {
        Self {
            samples_per_cell: 50,
            min_samples: 10_000,
            max_iterations: 100,
        }
    }
}

/// k-means centroids of uniform samples in `bounds`, flat `num_cells x dim`.
pub fn cvt_build(
    num_cells: usize,
    bounds: &Bounds,
    seed: u64,
    params: CvtParams,
) -> Result<Vec<f64>, RepertoireError> {
    if num_cells == 0 {
        return Err(RepertoireError::NoCells);
    }
    let dim = bounds.dim();
    if dim == 0 || bounds.lo.iter().zip(&bounds.hi).any(|(l, h)| !(h > l)) {
        return Err(RepertoireError::DegenerateBounds(format!("{bounds:?}")));
    }
    let mut r = rng::stream(seed, &[rng::tag::CVT]);
    let n = (num_cells * params.samples_per_cell.max(1)).max(params.min_samples);
    let mut samples = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for d in 0..dim {
            samples.push(r.random_range(bounds.lo[d]..bounds.hi[d]));
        }
    }
    let mut centroids = samples[..num_cells * dim].to_vec();
    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0; n];
    for _ in 0..params.max_iterations {
        let tree = KdTree::build(&centroids, dim);
        let mut changed = false;
        for (i, s) in samples.chunks_exact(dim).enumerate() {
            let (c, d) = tree.nearest(&centroids, s);
            if assign[i] != c {
                changed = true;
                assign[i] = c;
            }
            dists[i] = d;
        }
        let mut sums = vec![0.0; num_cells * dim];
        let mut counts = vec![0usize; num_cells];
        for (i, s) in samples.chunks_exact(dim).enumerate() {
            counts[assign[i]] += 1;
            for d in 0..dim {
                sums[assign[i] * dim + d] += s[d];
            }
        }
        let mut taken = vec![false; n];
        for c in 0..num_cells {
            if counts[c] == 0 {
                // Reseed to the farthest sample not yet used for reseeding.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                dists[far] = 0.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&samples[far * dim..(far + 1) * dim]);
                changed = true;
            } else {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elite {
    pub genotype: Genotype,
    pub fitness: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Added,
    Replaced,
    Rejected,
}

impl InsertOutcome {
    pub fn inserted(self) -> bool {
        !matches!(self, InsertOutcome::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QdMetrics {
    pub max_fitness: Option<f64>,
    pub coverage: usize,
    pub qd_score: f64,
    pub offset: f64,
}

/// Repertoire whose cells are the Voronoi regions of a fixed centroid set.
#[derive(Debug, Clone)]
pub struct CvtRepertoire {
    pub env_id: String,
    bounds: Bounds,
    centroids: Vec<f64>,
    tree: KdTree,
    cells: Vec<Option<Elite>>,
    clip_events: u64,
}

impl CvtRepertoire {
    pub fn new(env_id: &str, bounds: Bounds, centroids: Vec<f64>) -> Result<Self, RepertoireError> {
        let dim = bounds.dim();
        if centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(RepertoireError::NoCells);
        }
        let n = centroids.len() / dim;
        Ok(Self {
            env_id: env_id.to_string(),
            tree: KdTree::build(&centroids, dim),
            bounds,
            centroids,
            cells: vec![None; n],
            clip_events: 0,
        })
    }

    pub fn build(
        env_id: &str,
        bounds: Bounds,
        num_cells: usize,
        seed: u64,
        params: CvtParams,
    ) -> Result<Self, RepertoireError> {
        let centroids = cvt_build(num_cells, &bounds, seed, params)?;
        Self::new(env_id, bounds, centroids)
    }

    /// Same tessellation, no elites.
    pub fn empty_like(&self) -> Self {
        Self {
            cells: vec![None; self.cells.len()],
            clip_events: 0,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, cell: usize) -> &[f64] {
        &self.centroids[cell * self.dim()..(cell + 1) * self.dim()]
    }

    pub fn clip_events(&self) -> u64 {
        self.clip_events
    }

    pub fn cell(&self, idx: usize) -> Option<&Elite> {
        self.cells[idx].as_ref()
    }

    /// Occupied cells in index order.
    pub fn elites(&self) -> impl Iterator<Item = (usize, &Elite)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|e| (i, e)))
    }

    pub fn coverage(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn cell_index(&self, descriptor: &[f64]) -> usize {
        self.tree.nearest(&self.centroids, descriptor).0
    }

    /// Inserts when the cell is empty or the candidate is strictly fitter.
    pub fn insert(
        &mut self,
        genotype: &Genotype,
        fitness: f64,
        descriptor: &[f64],
    ) -> Result<InsertOutcome, RepertoireError> {
        if !fitness.is_finite() {
            return Err(RepertoireError::NonFiniteFitness(fitness));
        }
        if descriptor.len() != self.dim() {
            return Err(RepertoireError::DescriptorDim {
                expected: self.dim(),
                got: descriptor.len(),
            });
        }
        let mut d = descriptor.to_vec();
        if self.bounds.clip(&mut d) {
            self.clip_events += 1;
        }
        let idx = self.cell_index(&d);
        let outcome = match &self.cells[idx] {
            None => InsertOutcome::Added,
            Some(e) if fitness > e.fitness => InsertOutcome::Replaced,
            Some(_) => return Ok(InsertOutcome::Rejected),
        };
        self.cells[idx] = Some(Elite {
            genotype: genotype.clone(),
            fitness,
            descriptor: d,
        });
        Ok(outcome)
    }

    pub fn metrics(&self, offset: f64) -> QdMetrics {
        qd_metrics(self.elites().map(|(_, e)| e.fitness), offset)
    }

    pub fn genotypes(&self) -> Vec<Genotype> {
        self.elites().map(|(_, e)| e.genotype.clone()).collect()
    }

    const MAGIC: &'static [u8; 8] = b"SKBREP01";

    /// Binary layout (little-endian): magic, env id, dim, cell count, bounds,
    /// centroids, clip count, then one record per occupied cell.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.env_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.env_id.as_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_cells() as u32).to_le_bytes());
        for v in self.bounds.lo.iter().chain(&self.bounds.hi).chain(&self.centroids) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.clip_events.to_le_bytes());
        out.extend_from_slice(&(self.coverage() as u32).to_le_bytes());
        for (i, e) in self.elites() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&e.fitness.to_le_bytes());
            for v in &e.descriptor {
                out.extend_from_slice(&v.to_le_bytes());
            }
            e.genotype.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RepertoireError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != Self::MAGIC {
            return Err(RepertoireError::Malformed("bad magic".into()));
        }
        let id_len = r.u32()? as usize;
        let env_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|e| RepertoireError::Malformed(e.to_string()))?;
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let lo = r.f64s(dim)?;
        let hi = r.f64s(dim)?;
        let centroids = r.f64s(n * dim)?;
        let mut rep = Self::new(&env_id, Bounds::new(lo, hi), centroids)?;
        rep.clip_events = r.u64()?;
        let occupied = r.u32()? as usize;
        for _ in 0..occupied {
            let idx = r.u32()? as usize;
            if idx >= n {
                return Err(RepertoireError::Malformed(format!("cell {idx} out of range")));
            }
            let fitness = r.f64()?;
            let descriptor = r.f64s(dim)?;
            let (genotype, used) = Genotype::read_le(&r.bytes[r.pos..])?;
            r.pos += used;
            rep.cells[idx] = Some(Elite {
                genotype,
                fitness,
                descriptor,
            });
        }
        if r.pos != bytes.len() {
            return Err(RepertoireError::Malformed("trailing bytes".into()));
        }
        Ok(rep)
    }

    /// `cell_index, centroid_*, fitness, descriptor_*` for occupied cells.
    pub fn to_csv(&self) -> String {
        let dim = self.dim();
        let mut out = String::from("cell_index");
        for d in 0..dim {
            out.push_str(&format!(",centroid_{d}"));
        }
        out.push_str(",fitness");
        for d in 0..dim {
            out.push_str(&format!(",descriptor_{d}"));
        }
        out.push('\n');
        for (i, e) in self.elites() {
            out.push_str(&i.to_string());
            for c in self.centroid(i) {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(&format!(",{}", e.fitness));
            for v in &e.descriptor {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RepertoireError> {
        if self.pos + n > self.bytes.len() {
            return Err(RepertoireError::Malformed("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, RepertoireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, RepertoireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, RepertoireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, RepertoireError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Max fitness, coverage and offset-shifted QD score of a set of fitnesses.
pub fn qd_metrics(fitnesses: impl IntoIterator<Item = f64>, offset: f64) -> QdMetrics {
    let mut m = QdMetrics {
        max_fitness: None,
        coverage: 0,
        qd_score: 0.0,
        offset,
    };
    for f in fitnesses {
        m.coverage += 1;
        m.qd_score += f + offset;
        m.max_fitness = Some(m.max_fitness.map_or(f, |x: f64| x.max(f)));
    }
    m
}

/// Evaluates every policy once and inserts it by the standard rule.
/// Returns the number of successful insertions.
pub fn passive_record<P: Policy>(
    rep: &mut CvtRepertoire,
    skills: &[(P, Genotype)],
    env: &EnvSpec,
    eval_seed: u64,
) -> Result<usize, RepertoireError> {
    let mut inserted = 0;
    for (z, (policy, genotype)) in skills.iter().enumerate() {
        let eval = envs::evaluate(policy, env, rng::derive_seed(eval_seed, &[z as u64]))?;
        if rep.insert(genotype, eval.fitness, &eval.descriptor)?.inserted() {
            inserted += 1;
        }
    }
    Ok(inserted)
}

/// Number of recording calls for a training run of `total_steps` with the
/// given cadence.
pub fn recording_calls(total_steps: u64, cadence: u64) -> u64 {
    if cadence == 0 {
        0
    } else {
        total_steps / cadence
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchiveEntry {
    pub genotype: Genotype,
    pub fitness: f64,
    /// Learned descriptor used by the archive.
    pub descriptor: Vec<f64>,
    /// Trajectory summary the descriptor is computed from.
    pub summary: Vec<f64>,
    /// Hand-defined descriptor, kept only for reporting metrics.
    pub reference_descriptor: Vec<f64>,
}

/// Distance-thresholded archive without fixed cells.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnstructuredArchive {
    pub entries: Vec<ArchiveEntry>,
    pub l: f64,
    pub budget: usize,
    pub growth: f64,
}

impl UnstructuredArchive {
    pub fn new(l: f64, budget: usize) -> Self {
        assert!(l > 0.0 && budget > 0);
        Self {
            entries: Vec::new(),
            l,
            budget,
            growth: 1.05,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn nearest(&self, descriptor: &[f64]) -> Option<(usize, f64)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, sq_dist(&e.descriptor, descriptor)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, d)| (i, d.sqrt()))
    }

    fn insert_no_budget(&mut self, entry: ArchiveEntry) -> InsertOutcome {
        match self.nearest(&entry.descriptor) {
            Some((_, d)) if d > self.l => {
                self.entries.push(entry);
                InsertOutcome::Added
            }
            None => {
                self.entries.push(entry);
                InsertOutcome::Added
            }
            Some((i, _)) if entry.fitness > self.entries[i].fitness => {
                self.entries[i] = entry;
                InsertOutcome::Replaced
            }
            Some(_) => InsertOutcome::Rejected,
        }
    }

    /// Appends beyond `l`, otherwise replaces the nearest entry if strictly
    /// fitter. Over budget, `l` grows by 5% and the archive is re-filtered
    /// until it fits.
    pub fn insert(&mut self, entry: ArchiveEntry) -> Result<InsertOutcome, RepertoireError> {
        if let Some(first) = self.entries.first() {
            if first.descriptor.len() != entry.descriptor.len() {
                return Err(RepertoireError::DescriptorDim {
                    expected: first.descriptor.len(),
                    got: entry.descriptor.len(),
                });
            }
        }
        if !entry.fitness.is_finite() {
            return Err(RepertoireError::NonFiniteFitness(entry.fitness));
        }
        let outcome = self.insert_no_budget(entry);
        self.enforce_budget();
        Ok(outcome)
    }

    fn enforce_budget(&mut self) {
        while self.entries.len() > self.budget {
            self.l *= self.growth;
            self.refilter();
        }
    }

    /// Rebuilds the archive by inserting entries from fittest to least fit,
    /// so every pair closer than `l` is resolved in favour of the fitter one.
    pub fn refilter(&mut self) {
        let mut old = std::mem::take(&mut self.entries);
        old.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).unwrap_or(Ordering::Equal));
        for e in old {
            self.insert_no_budget(e);
        }
        self.enforce_budget();
    }

    pub fn max_fitness(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.fitness).reduce(f64::max)
    }

    /// Projects the entries onto a CVT repertoire through their reference
    /// descriptors, so AURORA runs report the same metrics as other methods.
    pub fn project(&self, template: &CvtRepertoire) -> Result<CvtRepertoire, RepertoireError> {
        let mut rep = template.empty_like();
        for e in &self.entries {
            rep.insert(&e.genotype, e.fitness, &e.reference_descriptor)?;
        }
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetSpec, OutputHead};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Bounds {
        Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0])
    }

    fn geno(tag: f64) -> Genotype {
        let spec = NetSpec::new(vec![1, 1], vec![], OutputHead::Linear).unwrap();
        let mut g = Genotype::zeros(&spec);
        g.params[0] = tag;
        g
    }

    fn small_rep(cells: usize) -> CvtRepertoire {
        CvtRepertoire::build("test", unit(), cells, 0, CvtParams { max_iterations: 30, ..CvtParams::default() })
            .unwrap()
    }

    #[test]
    fn single_cell_is_box_centre() {
        let c = cvt_build(1, &unit(), 3, CvtParams::default()).unwrap();
        assert!((c[0] - 0.5).abs() < 0.02 && (c[1] - 0.5).abs() < 0.02);
    }

    #[test]
    fn centroids_inside_bounds() {
        let b = Bounds::new(vec![-1.0, 2.0], vec![1.0, 5.0]);
        let c = cvt_build(64, &b, 1, CvtParams::default()).unwrap();
        assert!(c.chunks_exact(2).all(|p| b.contains(p)));
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let b = Bounds::new(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert!(matches!(
            cvt_build(4, &b, 0, CvtParams::default()),
            Err(RepertoireError::DegenerateBounds(_))
        ));
        assert!(matches!(cvt_build(0, &unit(), 0, CvtParams::default()), Err(RepertoireError::NoCells)));
    }

    #[test]
    fn cells_have_roughly_equal_mass() {
        let c = cvt_build(16, &unit(), 11, CvtParams::default()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 16];
        let n = 160_000;
        for _ in 0..n {
            let q = [r.random::<f64>(), r.random::<f64>()];
            counts[nearest_brute_force(&c, 2, &q)] += 1;
        }
        let share = n as f64 / 16.0;
        for k in counts {
            assert!((k as f64) > 0.5 * share && (k as f64) < 1.5 * share, "{counts:?}");
        }
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let c = cvt_build(200, &unit(), 5, CvtParams { samples_per_cell: 10, min_samples: 0, max_iterations: 5 }).unwrap();
        let tree = KdTree::build(&c, 2);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5000 {
            let q = [r.random_range(-0.2..1.2), r.random_range(-0.2..1.2)];
            assert_eq!(tree.nearest(&c, &q).0, nearest_brute_force(&c, 2, &q));
        }
    }

    #[test]
    fn insertion_rule() {
        let mut rep = small_rep(8);
        let d = [0.3, 0.3];
        assert_eq!(rep.insert(&geno(1.0), 5.0, &d).unwrap(), InsertOutcome::Added);
        assert_eq!(rep.insert(&geno(2.0), 4.0, &d).unwrap(), InsertOutcome::Rejected);
        assert_eq!(rep.insert(&geno(3.0), 5.0, &d).unwrap(), InsertOutcome::Rejected);
        let cell = rep.cell_index(&d);
        assert_eq!(rep.cell(cell).unwrap().genotype, geno(1.0));
        assert_eq!(rep.insert(&geno(4.0), 6.0, &d).unwrap(), InsertOutcome::Replaced);
        assert!(matches!(rep.insert(&geno(5.0), f64::NAN, &d), Err(RepertoireError::NonFiniteFitness(_))));
    }

    #[test]
    fn out_of_bounds_descriptor_is_clipped_and_counted() {
        let mut rep = small_rep(8);
        rep.insert(&geno(1.0), 0.0, &[1.7, -0.2]).unwrap();
        assert_eq!(rep.clip_events(), 1);
        let (_, e) = rep.elites().next().unwrap();
        assert_eq!(e.descriptor, vec![1.0, 0.0]);
    }

    #[test]
    fn metrics_arithmetic() {
        let m = qd_metrics([], 10.0);
        assert_eq!((m.coverage, m.qd_score, m.max_fitness), (0, 0.0, None));
        let m = qd_metrics([-5.0, 3.0], 10.0);
        assert_eq!((m.coverage, m.qd_score, m.max_fitness), (2, 18.0, Some(3.0)));
    }

    #[test]
    fn recording_schedule() {
        assert_eq!(recording_calls(300_000, 100_000), 3);
        assert_eq!(recording_calls(99_999, 100_000), 0);
    }

    #[test]
    fn passive_record_attempts_every_skill() {
        let env = EnvSpec::shipped(crate::envs::EnvKind::PointOmni);
        let mut rep = CvtRepertoire::build("point-omni", env.descriptor_bounds(), 32, 0, CvtParams::default()).unwrap();
        let dirs = [(0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1), (0.07, 0.07)];
        let skills: Vec<_> = dirs
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (move |_: &[f64], a: &mut [f64]| { a[0] = x; a[1] = y; }, geno(i as f64)))
            .collect();
        let n = passive_record(&mut rep, &skills, &env, 0).unwrap();
        assert_eq!(n, 5);
        assert_eq!(rep.coverage(), 5);
        // Re-recording the same skills meets equally fit incumbents.
        assert_eq!(passive_record(&mut rep, &skills, &env, 0).unwrap(), 0);
    }

    #[test]
    fn file_round_trip() {
        let mut rep = small_rep(16);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for i in 0..40 {
            let d = [r.random::<f64>(), r.random::<f64>()];
            rep.insert(&geno(i as f64), r.random_range(-3.0..3.0), &d).unwrap();
        }
        let back = CvtRepertoire::from_bytes(&rep.to_bytes()).unwrap();
        assert_eq!(back.metrics(5.0), rep.metrics(5.0));
        assert_eq!(back.centroids(), rep.centroids());
        assert_eq!(back.to_csv(), rep.to_csv());
        assert!(CvtRepertoire::from_bytes(&rep.to_bytes()[..30]).is_err());
    }

    #[test]
    fn empty_csv_has_header_only() {
        let rep = small_rep(4);
        assert_eq!(rep.to_csv(), "cell_index,centroid_0,centroid_1,fitness,descriptor_0,descriptor_1\n");
    }

    fn entry(d: Vec<f64>, fitness: f64) -> ArchiveEntry {
        ArchiveEntry {
            genotype: geno(fitness),
            fitness,
            reference_descriptor: d.clone(),
            descriptor: d,
            summary: vec![],
        }
    }

    #[test]
    fn unstructured_rules() {
        let mut a = UnstructuredArchive::new(0.2, 100);
        assert_eq!(a.insert(entry(vec![0.0, 0.0], 1.0)).unwrap(), InsertOutcome::Added);
        assert_eq!(a.insert(entry(vec![0.4, 0.0], 1.0)).unwrap(), InsertOutcome::Added);
        // Within l/2 of the first entry and fitter: replaces it.
        assert_eq!(a.insert(entry(vec![0.0, 0.1], 2.0)).unwrap(), InsertOutcome::Replaced);
        assert_eq!(a.insert(entry(vec![0.05, 0.1], 1.5)).unwrap(), InsertOutcome::Rejected);
        assert_eq!(a.len(), 2);
        assert!(a.insert(entry(vec![0.0], 1.0)).is_err());
    }

    #[test]
    fn replacement_matches_brute_force_nearest() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let mut a = UnstructuredArchive::new(0.2, 10_000);
            for _ in 0..30 {
                let d = vec![r.random_range(0.0..3.0), r.random_range(0.0..3.0)];
                a.insert(entry(d, r.random_range(0.0..1.0))).unwrap();
            }
            let anchor = r.random_range(0..a.len());
            let mut d = a.entries[anchor].descriptor.clone();
            d[0] += 0.05;
            let brute = a
                .entries
                .iter()
                .enumerate()
                .min_by(|x, y| sq_dist(&x.1.descriptor, &d).total_cmp(&sq_dist(&y.1.descriptor, &d)))
                .unwrap()
                .0;
            let before = a.entries[brute].fitness;
            a.insert(entry(d.clone(), before + 1.0)).unwrap();
            assert_eq!(a.entries[brute].descriptor, d);
        }
    }

    #[test]
    fn budget_grows_l() {
        let mut a = UnstructuredArchive::new(0.01, 10);
        for i in 0..30 {
            a.insert(entry(vec![i as f64 * 0.02, 0.0], i as f64)).unwrap();
        }
        assert!(a.len() <= 10);
        assert!(a.l > 0.01);
        for (i, x) in a.entries.iter().enumerate() {
            for y in &a.entries[i + 1..] {
                assert!(sq_dist(&x.descriptor, &y.descriptor).sqrt() > a.l / a.growth - 1e-12);
            }
        }
    }

    #[test]
    fn refilter_resolves_close_pairs_by_fitness() {
        let mut a = UnstructuredArchive::new(0.01, 100);
        for (x, f) in [(0.0, 1.0), (0.05, 3.0), (0.5, 2.0), (0.52, 0.5)] {
            a.insert(entry(vec![x, 0.0], f)).unwrap();
        }
        assert_eq!(a.len(), 4);
        a.l = 0.1;
        a.refilter();
        let mut kept: Vec<f64> = a.entries.iter().map(|e| e.fitness).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![2.0, 3.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cells_stay_consistent_and_elitist(
            ops in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -10.0f64..10.0), 1..200)
        ) {
            let mut rep = small_rep(16);
            let mut best = vec![f64::NEG_INFINITY; 16];
            let mut last_score = 0.0;
            for (x, y, f) in ops {
                rep.insert(&geno(f), f, &[x, y]).unwrap();
                let m = rep.metrics(10.0);
                prop_assert!(m.qd_score >= last_score);
                last_score = m.qd_score;
                for (i, e) in rep.elites() {
                    prop_assert_eq!(rep.cell_index(&e.descriptor), i);
                    prop_assert!(e.fitness >= best[i]);
                    best[i] = e.fitness;
                }
            }
        }
    }

    #[test]
    fn tanh_spec_hash_is_stable() {
        let a = NetSpec::mlp(2, &[4], 2, Activation::Tanh, OutputHead::Linear).unwrap();
        let b = NetSpec::mlp(2, &[4], 2, Activation::Relu, OutputHead::Linear).unwrap();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
