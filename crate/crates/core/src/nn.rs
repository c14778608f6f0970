//! Fixed-topology multilayer perceptrons.
//!
//! A network is described by a [`NetSpec`] and its weights live in a flat
//! [`Genotype`]. Layer `l` stores its weight matrix as `in x out` row-major
//! followed by its `out` biases, so a forward pass is `y = x W + b`.
//! Hidden layers apply their activation; the final layer is always linear
//! and the output head is interpreted by the caller (see [`gaussian_head`]
//! and [`softmax`]).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("genotype was built for spec {found:#018x}, expected {expected:#018x}")]
    SpecMismatch { expected: u64, found: u64 },
    #[error("malformed genotype bytes: {0}")]
    Malformed(String),
}

/// `e^y` for `y` in `[-40, 0]`: Cody-Waite reduction and a degree-13
/// Taylor polynomial, branch-free so loops over it vectorise.
#[inline(always)]
fn exp_nonpositive(y: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let k = y * std::f64::consts::LOG2_E + MAGIC;
    let n = k - MAGIC;
    let r = y - n * LN2_HI - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = (k.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    p * f64::from_bits(((bits + 1023) as u64) << 52)
}

/// Hyperbolic tangent within a few ulp of `f64::tanh`, about three times
/// faster. Used by every tanh layer and by the action squashing.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs().min(20.0);
    let t = exp_nonpositive(-2.0 * a);
    let y = (1.0 - t) / (1.0 + t);
    let a2 = a * a;
    let series = a * (1.0 + a2 * (-1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0))));
    let y = if a < 1e-3 { series } else { y };
    y.copysign(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply_slice(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => v.iter_mut().for_each(|x| *x = tanh(*x)),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    Linear,
    /// Final width is split into mean and log-std halves.
    TanhSquashedGaussian,
    CategoricalLogits,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    head: OutputHead,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    input: usize,
    output: usize,
    offset: usize,
}

impl LayerShape {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.input * self.output]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.input * self.output;
        &params[start..start + self.output]
    }
}

impl NetSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        activations: Vec<Activation>,
        head: OutputHead,
    ) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec("at least two layers required".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidSpec("layer sizes must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return Err(NnError::InvalidSpec(format!(
                "{} hidden layers but {} activations",
                layer_sizes.len() - 2,
                activations.len()
            )));
        }
        let out = *layer_sizes.last().unwrap();
        if head == OutputHead::TanhSquashedGaussian && out % 2 != 0 {
            return Err(NnError::InvalidSpec(
                "gaussian head needs an even output width".into(),
            ));
        }
        Ok(Self {
            layer_sizes,
            activations,
            head,
        })
    }

    /// `input -> hidden... -> output` with one activation for every hidden layer.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        head: OutputHead,
    ) -> Result<Self, NnError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, vec![activation; hidden.len()], head)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> impl Iterator<Item = LayerShape> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let shape = LayerShape {
                input: w[0],
                output: w[1],
                offset,
            };
            offset += w[0] * w[1] + w[1];
            shape
        })
    }

    fn activation(&self, layer: usize) -> Option<Activation> {
        self.activations.get(layer).copied()
    }

    /// Stable 64-bit FNV-1a hash of the topology.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for s in &self.layer_sizes {
            feed(&(*s as u64).to_le_bytes());
        }
        feed(&[0xff]);
        for a in &self.activations {
            feed(&[match a {
                Activation::Tanh => 1,
                Activation::Relu => 2,
            }]);
        }
        feed(&[match self.head {
            OutputHead::Linear => 1,
            OutputHead::TanhSquashedGaussian => 2,
            OutputHead::CategoricalLogits => 3,
        }]);
        h
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "parameters",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<(), NnError> {
        if input.len() != self.input_dim() * batch {
            return Err(NnError::DimensionMismatch {
                what: "input",
                expected: self.input_dim() * batch,
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Single-sample forward pass returning the pre-head output.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_params(params)?;
        self.check_input(input, 1)?;
        let mut scratch = Scratch::default();
        Ok(self.forward_unchecked(params, input, &mut scratch).to_vec())
    }

    /// Allocation-free forward pass for hot loops. Shapes are the caller's
    /// responsibility (checked in debug builds).
    pub fn forward_unchecked<'s>(
        &self,
        params: &[f64],
        input: &[f64],
        scratch: &'s mut Scratch,
    ) -> &'s [f64] {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.len(), self.input_dim());
        let Scratch { front, back } = scratch;
        front.clear();
        front.extend_from_slice(input);
        for (l, layer) in self.layers().enumerate() {
            back.clear();
            back.extend_from_slice(layer.bias(params));
            // Four weight rows per pass keeps the accumulator traffic down.
            let mut rows = layer.weights(params).chunks_exact(layer.output);
            let mut xs = front.chunks_exact(4);
            for x in &mut xs {
                let (r0, r1) = (rows.next().unwrap(), rows.next().unwrap());
                let (r2, r3) = (rows.next().unwrap(), rows.next().unwrap());
                for ((((o, a), b), c), d) in back.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
                    *o += (x[0] * a + x[1] * b) + (x[2] * c + x[3] * d);
                }
            }
            for (&x, row) in xs.remainder().iter().zip(rows) {
                for (o, &wij) in back.iter_mut().zip(row) {
                    *o += x * wij;
                }
            }
            if let Some(act) = self.activation(l) {
                act.apply_slice(back);
            }
            std::mem::swap(front, back);
        }
        front
    }

    /// Batched forward pass over `batch` row-major inputs, keeping every
    /// layer's output for a later [`NetSpec::backward_batch`].
    pub fn forward_batch(
        &self,
        params: &[f64],
        inputs: &[f64],
        batch: usize,
    ) -> Result<Tape, NnError> {
        self.check_params(params)?;
        self.check_input(inputs, batch)?;
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(inputs.to_vec());
        for (l, layer) in self.layers().enumerate() {
            let x = acts.last().unwrap();
            let mut y = Vec::with_capacity(batch * layer.output);
            for _ in 0..batch {
                y.extend_from_slice(layer.bias(params));
            }
            gemm(
                batch,
                layer.input,
                layer.output,
                Mat::row_major(x, layer.input),
                Mat::row_major(layer.weights(params), layer.output),
                &mut y,
            );
            if let Some(act) = self.activation(l) {
                act.apply_slice(&mut y);
            }
            acts.push(y);
        }
        Ok(Tape { batch, acts })
    }

    /// Reverse-mode pass. `upstream` is `batch x output_dim`; parameter
    /// gradients are summed over the batch and added into `param_grad`.
    /// Returns the `batch x input_dim` input gradient.
    pub fn backward_batch(
        &self,
        params: &[f64],
        tape: &Tape,
        upstream: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if param_grad.len() != params.len() {
            return Err(NnError::DimensionMismatch {
                what: "parameter gradient buffer",
                expected: params.len(),
                got: param_grad.len(),
            });
        }
        self.backward_impl(params, tape, upstream, Some(param_grad))
    }

    /// Input gradient only, skipping the parameter-gradient products.
    pub fn input_grad_batch(
        &self,
        params: &[f64],
        tape: &Tape,
        upstream: &[f64],
    ) -> Result<Vec<f64>, NnError> {
        self.backward_impl(params, tape, upstream, None)
    }

    fn backward_impl(
        &self,
        params: &[f64],
        tape: &Tape,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>, NnError> {
        self.check_params(params)?;
        let batch = tape.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(NnError::DimensionMismatch {
                what: "upstream gradient",
                expected: batch * self.output_dim(),
                got: upstream.len(),
            });
        }
        let layers: Vec<LayerShape> = self.layers().collect();
        let mut g = upstream.to_vec();
        for (l, layer) in layers.iter().enumerate().rev() {
            if let Some(act) = self.activation(l) {
                for (gv, &y) in g.iter_mut().zip(&tape.acts[l + 1]) {
                    *gv *= act.grad_from_output(y);
                }
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                let x = &tape.acts[l];
                let (wg, bg) = pg
                    [layer.offset..layer.offset + layer.input * layer.output + layer.output]
                    .split_at_mut(layer.input * layer.output);
                // dW += X^T G
                gemm(
                    layer.input,
                    batch,
                    layer.output,
                    Mat::transposed(x, layer.input),
                    Mat::row_major(&g, layer.output),
                    wg,
                );
                for row in g.chunks_exact(layer.output) {
                    for (b, &v) in bg.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
            // dX = G W^T
            let mut gin = vec![0.0; batch * layer.input];
            gemm(
                batch,
                layer.output,
                layer.input,
                Mat::row_major(&g, layer.output),
                Mat::transposed(layer.weights(params), layer.output),
                &mut gin,
            );
            g = gin;
        }
        Ok(g)
    }

    /// Single-sample reverse pass: `(param_grad, input_grad)`.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let tape = self.forward_batch(params, input, 1)?;
        let mut pg = vec![0.0; params.len()];
        let ig = self.backward_batch(params, &tape, upstream, &mut pg)?;
        Ok((pg, ig))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Scratch {
    front: Vec<f64>,
    back: Vec<f64>,
}

/// Per-layer outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `batch x output_dim` pre-head outputs.
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// View of the transpose of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c (m x n, row-major) += a (m x k) * b (k x n)`
fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Flat parameter vector tagged with the hash of the topology it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub params: Vec<f64>,
    pub spec_hash: u64,
}

const GENOTYPE_MAGIC: &[u8; 4] = b"GNT1";

impl Genotype {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            params: vec![0.0; spec.param_count()],
            spec_hash: spec.hash(),
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` initialisation for weights and biases,
    /// rounded to single precision.
    pub fn random<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(spec.param_count());
        for layer in spec.layers() {
            let bound = 1.0 / (layer.input as f64).sqrt();
            for _ in 0..layer.input * layer.output + layer.output {
                params.push(rng.random_range(-bound..bound));
            }
        }
        let mut g = Self {
            params,
            spec_hash: spec.hash(),
        };
        g.quantize();
        g
    }

    /// Same as [`Genotype::random`] but with the final layer scaled down,
    /// which keeps freshly initialised policies near zero output.
    pub fn random_small_head<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R, scale: f64) -> Self {
        let mut g = Self::random(spec, rng);
        let last = spec.layers().last().unwrap();
        for p in &mut g.params[last.offset..] {
            *p *= scale;
        }
        g.quantize();
        g
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Rounds every parameter to the nearest `f32`, so the on-disk format is
    /// lossless for anything the library produces.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    pub fn check(&self, spec: &NetSpec) -> Result<(), NnError> {
        if self.spec_hash != spec.hash() {
            return Err(NnError::SpecMismatch {
                expected: spec.hash(),
                found: self.spec_hash,
            });
        }
        spec.check_params(&self.params)?;
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::NonFinite("genotype"));
        }
        Ok(())
    }

    /// `magic | spec hash (u64) | count (u32) | count x f32`, all little-endian.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(GENOTYPE_MAGIC);
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
    }

    /// Parses one genotype and returns it with the number of bytes consumed.
    pub fn read_le(bytes: &[u8]) -> Result<(Self, usize), NnError> {
        let header = 4 + 8 + 4;
        if bytes.len() < header || &bytes[..4] != GENOTYPE_MAGIC {
            return Err(NnError::Malformed("bad genotype header".into()));
        }
        let spec_hash = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let end = header + 4 * count;
        if bytes.len() < end {
            return Err(NnError::Malformed(format!(
                "expected {count} parameters, buffer too short"
            )));
        }
        let params = bytes[header..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((Self { params, spec_hash }, end))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Descends along `grad`; the updated parameters are rounded to `f32`.
    pub fn step(&mut self, genotype: &mut Genotype, grad: &[f64]) -> Result<(), NnError> {
        if grad.len() != genotype.params.len() || grad.len() != self.m.len() {
            return Err(NnError::DimensionMismatch {
                what: "adam gradient",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            tracing::warn!(index = i, value = grad[i], "rejecting non-finite gradient");
            return Err(NnError::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in genotype
            .params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = (*p - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32 as f64;
        }
        Ok(())
    }
}

/// Polyak averaging `target <- (1 - tau) target + tau source`.
pub fn soft_update(target: &mut Genotype, source: &Genotype, tau: f64) {
    for (t, s) in target.params.iter_mut().zip(&source.params) {
        *t = ((1.0 - tau) * *t + tau * s) as f32 as f64;
    }
}

/// Splits a gaussian head output into `(mean, clamped log-std)`.
pub fn gaussian_head(out: &[f64]) -> (&[f64], Vec<f64>) {
    let half = out.len() / 2;
    let log_std = out[half..]
        .iter()
        .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
        .collect();
    (&out[..half], log_std)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tanh_net() -> NetSpec {
        NetSpec::mlp(2, &[16], 2, Activation::Tanh, OutputHead::Linear).unwrap()
    }

    /// Layer-by-layer evaluation written independently of the GEMM path.
    fn naive_forward(spec: &NetSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let sizes = spec.layer_sizes();
        let mut x = input.to_vec();
        let mut offset = 0;
        for l in 0..sizes.len() - 1 {
            let (nin, nout) = (sizes[l], sizes[l + 1]);
            let mut y = vec![0.0; nout];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = params[offset + nin * nout + o];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * params[offset + i * nout + o];
                }
                *yo = if l + 2 < sizes.len() {
                    match spec.activations[l] {
                        Activation::Tanh => acc.tanh(),
                        Activation::Relu => acc.max(0.0),
                    }
                } else {
                    acc
                };
            }
            offset += nin * nout + nout;
            x = y;
        }
        x
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = tanh_net();
        let g = Genotype::zeros(&spec);
        assert_eq!(spec.forward(&g.params, &[0.3, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let spec = NetSpec::new(vec![2, 2], vec![], OutputHead::Linear).unwrap();
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(spec.forward(&params, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn matches_naive_forward() {
        let spec = tanh_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Genotype::random(&spec, &mut rng);
        for _ in 0..100 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let a = spec.forward(&g.params, &x).unwrap();
            let batched = spec.forward_batch(&g.params, &x, 1).unwrap();
            let b = naive_forward(&spec, &g.params, &x);
            for ((u, v), w) in a.iter().zip(&b).zip(batched.output()) {
                assert!((u - v).abs() <= 1e-10 * v.abs().max(1e-12));
                assert!((w - v).abs() <= 1e-10 * v.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = tanh_net();
        let g = Genotype::zeros(&spec);
        assert!(matches!(
            spec.forward(&g.params, &[1.0]),
            Err(NnError::DimensionMismatch { .. })
        ));
        assert!(spec.forward(&g.params[1..], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(NetSpec::new(vec![3], vec![], OutputHead::Linear).is_err());
        assert!(NetSpec::mlp(2, &[4], 3, Activation::Tanh, OutputHead::TanhSquashedGaussian).is_err());
        assert!(NetSpec::new(vec![2, 0, 2], vec![Activation::Relu], OutputHead::Linear).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = tanh_net();
        let g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let (pg, ig) = spec.backward(&g.params, &[0.5, 0.1], &[0.0, 0.0]).unwrap();
        assert!(pg.iter().all(|v| *v == 0.0));
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let spec = NetSpec::new(vec![3, 2], vec![], OutputHead::Linear).unwrap();
        let g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        let x = [0.5, -1.0, 2.0];
        let up = [3.0, -0.25];
        let (pg, ig) = spec.backward(&g.params, &x, &up).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(pg[i * 2 + o], x[i] * up[o]);
            }
            let expected = g.params[i * 2] * up[0] + g.params[i * 2 + 1] * up[1];
            assert!((ig[i] - expected).abs() < 1e-14);
        }
        assert_eq!(&pg[6..], &up);
    }

    #[test]
    fn batch_gradient_is_sum_of_samples() {
        let spec = NetSpec::mlp(3, &[5, 4], 2, Activation::Relu, OutputHead::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Genotype::random(&spec, &mut rng);
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ups: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = spec.forward_batch(&g.params, &xs, 4).unwrap();
        let mut batch_grad = vec![0.0; g.len()];
        let batch_in = spec.backward_batch(&g.params, &tape, &ups, &mut batch_grad).unwrap();
        let mut sum = vec![0.0; g.len()];
        for b in 0..4 {
            let (pg, ig) = spec
                .backward(&g.params, &xs[b * 3..b * 3 + 3], &ups[b * 2..b * 2 + 2])
                .unwrap();
            for (s, p) in sum.iter_mut().zip(&pg) {
                *s += p;
            }
            for (a, c) in ig.iter().zip(&batch_in[b * 3..b * 3 + 3]) {
                assert!((a - c).abs() < 1e-12);
            }
        }
        for (a, b) in sum.iter().zip(&batch_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let spec = tanh_net();
        let mut g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(4));
        let before = g.clone();
        let mut adam = Adam::new(g.len(), 3e-4);
        adam.step(&mut g, &vec![0.0; before.len()]).unwrap();
        assert_eq!(g, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let spec = tanh_net();
        let mut g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(5));
        let before = g.clone();
        let mut adam = Adam::new(g.len(), 1e-3);
        let grad: Vec<f64> = (0..g.len()).map(|i| if i % 2 == 0 { 0.7 } else { -2.0 }).collect();
        adam.step(&mut g, &grad).unwrap();
        for (a, b) in g.params.iter().zip(&before.params) {
            assert!(((a - b).abs() - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let spec = tanh_net();
        let mut g = Genotype::zeros(&spec);
        let mut adam = Adam::new(g.len(), 1e-3);
        let mut grad = vec![0.0; g.len()];
        grad[3] = f64::NAN;
        assert_eq!(adam.step(&mut g, &grad), Err(NnError::NonFinite("gradient")));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let spec = tanh_net();
        let run = || {
            let mut g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(6));
            let mut adam = Adam::new(g.len(), 3e-4);
            for k in 0..10 {
                let grad: Vec<f64> = g.params.iter().map(|p| p * 0.3 + k as f64 * 1e-3).collect();
                adam.step(&mut g, &grad).unwrap();
            }
            (g, adam)
        };
        let (g1, a1) = run();
        let (g2, a2) = run();
        assert_eq!(g1.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                   g2.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>());
        assert_eq!(a1, a2);
    }

    #[test]
    fn genotype_bytes_round_trip() {
        let spec = tanh_net();
        let g = Genotype::random(&spec, &mut ChaCha8Rng::seed_from_u64(7));
        let mut buf = Vec::new();
        g.write_le(&mut buf);
        let (back, used) = Genotype::read_le(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, g);
        back.check(&spec).unwrap();
    }

    #[test]
    fn gaussian_head_clamps_log_std() {
        let (mean, log_std) = gaussian_head(&[0.1, -0.2, 9.0, -40.0]);
        assert_eq!(mean, &[0.1, -0.2]);
        assert_eq!(log_std, vec![LOG_STD_MAX, LOG_STD_MIN]);
    }

    #[test]
    fn softmax_is_a_simplex() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1000.0, 999.0, -5.0]);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn fast_tanh_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..400_001 {
            let x = (i as f64 - 200_000.0) * 1.3e-4;
            worst = worst.max((tanh(x) - x.tanh()).abs());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(1e3), 1.0);
        assert_eq!(tanh(-1e3), -1.0);
        assert!(tanh(-1e-9) < 0.0);
    }
}
