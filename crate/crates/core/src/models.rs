//! The classifier, the per-example scorer and the group scorer.
//!
//! All three are one-hidden-layer tanh perceptrons sharing [`Mlp`], which
//! owns the flat parameter layout and the hand-derived backward pass. The
//! layout is `W1 (hidden x input, row-major), b1, W2 (output x hidden), b2`.
//! With `hidden == 0` the network is affine: `W (output x input), b`.

use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::numeric::{self, check_finite, check_len, Rng};

/// Shape and flat-parameter bookkeeping of a one-hidden-layer tanh network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            input,
            hidden,
            output,
        }
    }

    pub fn num_params(&self) -> usize {
        if self.hidden == 0 {
            self.output * self.input + self.output
        } else {
            self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
        }
    }

    /// Offset of the output layer (`W2`, or `W` when affine).
    pub fn output_layer_offset(&self) -> usize {
        if self.hidden == 0 {
            0
        } else {
            self.input * self.hidden + self.hidden
        }
    }

    /// Offset of the output bias.
    pub fn output_bias_offset(&self) -> usize {
        self.num_params() - self.output
    }

    /// Glorot-uniform weights, `a = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            slice.iter_mut().for_each(|w| *w = rng.uniform_in(-a, a));
        };
        if self.hidden == 0 {
            let n = self.output * self.input;
            fill(&mut params[..n], self.input, self.output);
        } else {
            let n1 = self.input * self.hidden;
            fill(&mut params[..n1], self.input, self.hidden);
            let off = self.output_layer_offset();
            let n2 = self.hidden * self.output;
            fill(&mut params[off..off + n2], self.hidden, self.output);
        }
        params
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        check_len("mlp parameters", self.num_params(), params.len())?;
        check_len("mlp input", self.input, x.len())?;
        check_finite("mlp parameters", params)
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Forward> {
        self.check(params, x)?;
        if self.hidden == 0 {
            let output = affine(
                &params[..self.output * self.input],
                &params[self.output * self.input..],
                x,
            );
            return Ok(Forward {
                hidden: Vec::new(),
                output,
            });
        }
        let n1 = self.input * self.hidden;
        let (w1, rest) = params.split_at(n1);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden * self.output);
        let hidden: Vec<f64> = affine(w1, b1, x).into_iter().map(f64::tanh).collect();
        let output = affine(w2, b2, &hidden);
        Ok(Forward { hidden, output })
    }

    /// Gradient w.r.t. the parameters of `d_output . output(params, x)`.
    pub fn backward(&self, params: &[f64], x: &[f64], fwd: &Forward, d_output: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        if self.hidden == 0 {
            let (gw, gb) = grad.split_at_mut(self.output * self.input);
            outer_into(d_output, x, gw);
            gb.copy_from_slice(d_output);
            return grad;
        }
        let n1 = self.input * self.hidden;
        let off2 = self.output_layer_offset();
        let w2 = &params[off2..off2 + self.hidden * self.output];
        let (g1, g2) = grad.split_at_mut(off2);
        let (gw2, gb2) = g2.split_at_mut(self.hidden * self.output);
        outer_into(d_output, &fwd.hidden, gw2);
        gb2.copy_from_slice(d_output);
        let mut d_pre = vec![0.0; self.hidden];
        for (o, &d) in d_output.iter().enumerate() {
            let row = &w2[o * self.hidden..(o + 1) * self.hidden];
            for (dp, w) in d_pre.iter_mut().zip(row) {
                *dp += w * d;
            }
        }
        for (dp, a) in d_pre.iter_mut().zip(&fwd.hidden) {
            *dp *= 1.0 - a * a;
        }
        let (gw1, gb1) = g1.split_at_mut(n1);
        outer_into(&d_pre, x, gw1);
        gb1.copy_from_slice(&d_pre);
        grad
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            w[o * x.len()..(o + 1) * x.len()]
                .iter()
                .zip(x)
                .fold(bias, |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

fn outer_into(rows: &[f64], cols: &[f64], out: &mut [f64]) {
    for (r, &a) in rows.iter().enumerate() {
        for (c, &b) in cols.iter().enumerate() {
            out[r * cols.len() + c] = a * b;
        }
    }
}

/// A per-example differentiable loss `ℓ(x, y; θ)` over a flat parameter vector.
pub trait LossModel {
    fn num_params(&self) -> usize;

    fn loss(&self, params: &[f64], x: &[f64], y: usize) -> Result<f64>;

    fn loss_and_grad(&self, params: &[f64], x: &[f64], y: usize) -> Result<(f64, Vec<f64>)>;
}

/// Softmax classifier with cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpClassifier {
    pub net: Mlp,
}

impl MlpClassifier {
    pub fn new(dim: usize, hidden: usize, classes: usize) -> Self {
        MlpClassifier {
            net: Mlp::new(dim, hidden, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.net.output
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        self.net.init(rng)
    }

    pub fn probs(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        numeric::softmax(&self.net.forward(params, x)?.output)
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<usize> {
        let logits = self.net.forward(params, x)?.output;
        Ok(argmax(&logits))
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y < self.classes() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: y,
                len: self.classes(),
            })
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().fold(0.0, |acc, v| acc + (v - max).exp()).ln()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

impl LossModel for MlpClassifier {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn loss(&self, params: &[f64], x: &[f64], y: usize) -> Result<f64> {
        self.check_label(y)?;
        let z = self.net.forward(params, x)?.output;
        Ok((log_sum_exp(&z) - z[y]).max(0.0))
    }

    fn loss_and_grad(&self, params: &[f64], x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        self.check_label(y)?;
        let fwd = self.net.forward(params, x)?;
        let loss = (log_sum_exp(&fwd.output) - fwd.output[y]).max(0.0);
        let mut d_logits = numeric::softmax(&fwd.output)?;
        d_logits[y] -= 1.0;
        Ok((loss, self.net.backward(params, x, &fwd, &d_logits)))
    }
}

/// Scalar-output scorer producing within-batch softmax weights.
///
/// The input is the example's feature vector. With `label_classes` set, a
/// one-hot encoding of the label is appended. A frozen scorer scores every
/// example 0: weights are uniform and its gradients vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScorer {
    pub net: Mlp,
    pub label_classes: Option<usize>,
    pub frozen: bool,
}

impl ExampleScorer {
    pub fn new(dim: usize, hidden: usize) -> Self {
        ExampleScorer {
            net: Mlp::new(dim, hidden, 1),
            label_classes: None,
            frozen: false,
        }
    }

    /// A scorer that also sees a one-hot label.
    pub fn with_label(dim: usize, hidden: usize, classes: usize) -> Self {
        ExampleScorer {
            net: Mlp::new(dim + classes, hidden, 1),
            label_classes: Some(classes),
            frozen: false,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        self.net.init(rng)
    }

    fn input<'a>(&self, ex: &'a LabeledExample) -> Result<Cow<'a, [f64]>> {
        match self.label_classes {
            None => Ok(Cow::Borrowed(&ex.features)),
            Some(c) => {
                if ex.label >= c {
                    return Err(Error::IndexOutOfRange {
                        index: ex.label,
                        len: c,
                    });
                }
                let mut v = Vec::with_capacity(ex.features.len() + c);
                v.extend_from_slice(&ex.features);
                v.extend((0..c).map(|k| if k == ex.label { 1.0 } else { 0.0 }));
                Ok(Cow::Owned(v))
            }
        }
    }

    pub fn score(&self, params: &[f64], ex: &LabeledExample) -> Result<f64> {
        if self.frozen {
            return Ok(0.0);
        }
        let score = self.net.forward(params, &self.input(ex)?)?.output[0];
        if score.is_finite() {
            Ok(score)
        } else {
            Err(Error::NonFinite("scorer output"))
        }
    }

    /// Gradient of the raw score of `ex` w.r.t. the scorer parameters.
    pub fn score_grad(&self, params: &[f64], ex: &LabeledExample) -> Result<Vec<f64>> {
        if self.frozen {
            check_len("scorer parameters", self.num_params(), params.len())?;
            return Ok(vec![0.0; self.num_params()]);
        }
        let x = self.input(ex)?;
        let fwd = self.net.forward(params, &x)?;
        Ok(self.net.backward(params, &x, &fwd, &[1.0]))
    }

    /// Within-batch softmax of the scores.
    pub fn batch_probs(&self, params: &[f64], batch: &[&LabeledExample]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Empty("scorer batch"));
        }
        let scores = batch
            .iter()
            .map(|ex| self.score(params, ex))
            .collect::<Result<Vec<_>>>()?;
        numeric::softmax(&scores)
    }

    /// `∇ψ log p_i = ∇ψ s_i − Σ_j p_j ∇ψ s_j`.
    pub fn logprob_grad(
        &self,
        params: &[f64],
        batch: &[&LabeledExample],
        i: usize,
    ) -> Result<Vec<f64>> {
        if i >= batch.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: batch.len(),
            });
        }
        let mut coeffs = vec![0.0; batch.len()];
        coeffs[i] = 1.0;
        self.weighted_logprob_grad(params, batch, &coeffs)
    }

    /// `Σ_i c_i ∇ψ log p_i`, evaluated as `Σ_i (c_i − p_i Σ_j c_j) ∇ψ s_i`.
    pub fn weighted_logprob_grad(
        &self,
        params: &[f64],
        batch: &[&LabeledExample],
        coeffs: &[f64],
    ) -> Result<Vec<f64>> {
        check_len("scorer coefficients", batch.len(), coeffs.len())?;
        let probs = self.batch_probs(params, batch)?;
        let total: f64 = coeffs.iter().sum();
        let mut grad = vec![0.0; self.num_params()];
        if self.frozen {
            return Ok(grad);
        }
        for ((ex, &c), &p) in batch.iter().zip(coeffs).zip(&probs) {
            let w = c - p * total;
            if w != 0.0 {
                numeric::axpy(w, &self.score_grad(params, ex)?, &mut grad)?;
            }
        }
        Ok(grad)
    }
}

/// Distribution over source groups given an availability indicator vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupScorer {
    pub net: Mlp,
}

impl GroupScorer {
    pub fn new(groups: usize, hidden: usize) -> Self {
        GroupScorer {
            net: Mlp::new(groups, hidden, groups),
        }
    }

    pub fn groups(&self) -> usize {
        self.net.output
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Glorot-initialized hidden layer, zero output weights, and output bias
    /// set to `prior_logits` (zeros when absent), so the initial distribution
    /// is exactly the masked softmax of the prior.
    pub fn init(&self, rng: &mut Rng, prior_logits: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut params = self.net.init(rng);
        let off = self.net.output_layer_offset();
        let bias = self.net.output_bias_offset();
        params[off..bias].iter_mut().for_each(|w| *w = 0.0);
        if let Some(prior) = prior_logits {
            check_len("prior logits", self.groups(), prior.len())?;
            check_finite("prior logits", prior)?;
            params[bias..].copy_from_slice(prior);
        }
        Ok(params)
    }

    fn mask(&self, availability: &[f64]) -> Result<Vec<bool>> {
        check_len("availability", self.groups(), availability.len())?;
        let mask: Vec<bool> = availability.iter().map(|&a| a != 0.0).collect();
        if mask.iter().any(|&m| m) {
            Ok(mask)
        } else {
            Err(Error::Empty("availability (no group available)"))
        }
    }

    pub fn probs(&self, params: &[f64], availability: &[f64]) -> Result<Vec<f64>> {
        let mask = self.mask(availability)?;
        let logits = self.net.forward(params, availability)?.output;
        numeric::masked_softmax(&logits, &mask)
    }

    /// `∇ω log g(i | availability; ω)`.
    pub fn logprob_grad(&self, params: &[f64], availability: &[f64], i: usize) -> Result<Vec<f64>> {
        let mut coeffs = vec![0.0; self.groups()];
        if i >= coeffs.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: coeffs.len(),
            });
        }
        coeffs[i] = 1.0;
        self.weighted_logprob_grad(params, availability, &coeffs)
    }

    /// `Σ_{i available} c_i ∇ω log g(i | availability; ω)`. A nonzero
    /// coefficient on an unavailable group is an error.
    pub fn weighted_logprob_grad(
        &self,
        params: &[f64],
        availability: &[f64],
        coeffs: &[f64],
    ) -> Result<Vec<f64>> {
        check_len("group coefficients", self.groups(), coeffs.len())?;
        let mask = self.mask(availability)?;
        if let Some(i) = (0..coeffs.len()).find(|&i| !mask[i] && coeffs[i] != 0.0) {
            return Err(Error::Unavailable(i));
        }
        let fwd = self.net.forward(params, availability)?;
        let probs = numeric::masked_softmax(&fwd.output, &mask)?;
        let total: f64 = coeffs.iter().sum();
        let d_logits: Vec<f64> = coeffs
            .iter()
            .zip(&probs)
            .zip(&mask)
            .map(|((&c, &p), &m)| if m { c - p * total } else { 0.0 })
            .collect();
        Ok(self.net.backward(params, availability, &fwd, &d_logits))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DDSPARAM";
const CHECKPOINT_VERSION: u32 = 1;

/// Encodes parameters as `DDSPARAM`, version (u32 LE), length (u32 LE), then
/// each value as f64 LE.
pub fn encode_params(params: &[f64]) -> Result<Vec<u8>> {
    let len =
        u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    let mut out = Vec::with_capacity(16 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing DDSPARAM header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * len {
        return Err(Error::Checkpoint(format!(
            "header declares {len} values but body holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_params(path: &Path, params: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_params(params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<f64>> {
    decode_params(&fs::read(path)?)
}
