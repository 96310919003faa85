//! Dense-vector arithmetic and seeded randomness.
//!
//! Every reduction sums in ascending index order so that results are
//! bit-reproducible across runs. Vectors are plain `f64` slices; functions
//! that combine two vectors check lengths and return [`Error::LengthMismatch`].
//!
//! Randomness comes from [`Rng`], a ChaCha8 stream cipher keyed by a 64-bit
//! seed. ChaCha exposes 2^64 independent streams per key, which is how one
//! top-level seed is split into independent sources for data generation,
//! initialization, and batching (see [`Stream`]).

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on the probability sum accepted by [`categorical_sample`].
pub const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            context,
            expected,
            found,
        })
    }
}

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// `Σ u_i v_i`, summed in ascending index order.
pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len("dot", u.len(), v.len())?;
    Ok(u.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b))
}

pub fn norm(u: &[f64]) -> f64 {
    u.iter().fold(0.0, |acc, a| acc + a * a).sqrt()
}

/// Result of [`cosine`]; `degenerate` is set when either input had
/// (numerically) zero norm and the value was forced to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine similarity. A zero-norm input yields 0 with `degenerate = true`
/// instead of an error, so vanishing gradients give a neutral reward.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<Cosine> {
    let uv = dot(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu < ZERO_NORM || nv < ZERO_NORM {
        log::debug!("cosine of a zero-norm vector; returning 0");
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (uv / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `y += a * x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    check_len("axpy", y.len(), x.len())?;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
    Ok(())
}

pub fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

/// Elementwise product.
pub fn hadamard(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len("hadamard", u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| a * b).collect())
}

/// Arithmetic mean of equal-length vectors, accumulated in the given order.
pub fn mean_of(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::Empty("mean_of"))?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        axpy(1.0, v, &mut acc)?;
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    check_finite("softmax input", scores)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax restricted to entries where `mask` is true; masked entries are
/// exactly 0.0. Equivalent to setting their logits to -inf.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_len("masked_softmax", logits.len(), mask.len())?;
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Empty("masked_softmax (no available entries)"));
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("masked_softmax input"));
    }
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .fold(0.0, |acc, &p| acc + p * p.ln())
}

/// Draws an index with probability `probs[i]` from one uniform variate and a
/// cumulative scan in index order.
pub fn categorical_sample(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Empty("categorical_sample"));
    }
    let sum: f64 = probs.iter().sum();
    let min = probs.iter().copied().fold(f64::INFINITY, f64::min);
    if !(sum - 1.0).abs().le(&SIMPLEX_TOL) || min < 0.0 || !sum.is_finite() {
        return Err(Error::OffSimplex { sum, min });
    }
    let u = rng.uniform();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    // Rounding left u above the final partial sum.
    Ok(probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1))
}

/// Independent random streams derived from one top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    LabelNoise = 2,
    Split = 3,
    ModelInit = 4,
    ScorerInit = 5,
    TrainBatches = 6,
    DevBatches = 7,
    GroupLoad = 8,
    GroupInner = 9,
    RetrainInit = 10,
    Warmup = 11,
    /// Batches drawn only to summarize a trained scorer.
    Probe = 12,
}

/// Seeded generator. Draw order is part of each algorithm's contract: equal
/// seeds give bit-identical sequences on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The generator for one named stream of a top-level seed.
    pub fn stream(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64);
        Rng { inner }
    }

    /// A 64-bit seed for APIs that take one, derived from a named stream.
    pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
        Rng::stream(seed, stream).next_u64()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in [0, n). Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
