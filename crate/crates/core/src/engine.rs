//! Per-example data selection for classification.
//!
//! One step takes a training batch `x_1..x_B` and a dev batch:
//!
//! 1. `p = softmax(s(x_1; ψ), ..., s(x_B; ψ))` within the batch;
//! 2. `g_θ = Σ p_i ∇θ ℓ_i(θ_{t−1})`, then `θ_t = step(θ_{t−1}, g_θ)`;
//! 3. `d_θ` is the mean dev gradient at `θ_t`;
//! 4. `r_i = d_θᵀ (k ⊙ ∇θ ℓ_i(θ_{t−1}))` with `k` the optimizer's reward
//!    kernel, or the forward-difference estimate of the same product;
//! 5. `d_ψ = Σ_i p_i r_i ∇ψ log p_i` and `ψ ← ψ + η_ψ d_ψ` via the scorer's
//!    optimizer.
//!
//! All reductions run in batch index order, so results are reproducible bit
//! for bit. The kernel is read from the model optimizer before it steps.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::models::{ExampleScorer, LossModel, MlpClassifier};
use crate::numeric::{self, axpy, check_finite, check_len, dot, norm, Rng, Stream};
use crate::optim::{Optimizer, OptimizerConfig};

/// Alignment between two gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMetric {
    #[default]
    Dot,
    Cosine,
}

impl RewardMetric {
    pub fn apply(self, u: &[f64], v: &[f64]) -> Result<f64> {
        match self {
            RewardMetric::Dot => dot(u, v),
            RewardMetric::Cosine => Ok(numeric::cosine(u, v)?.value),
        }
    }
}

/// How rewards are combined into the scorer gradient.
///
/// `Weighted` is `Σ_i p_i r_i ∇ψ log p_i`, the exact negative derivative of
/// the one-step dev loss. `BatchMean` is `(1/B) Σ_i r_i ∇ψ log p_i`; the two
/// coincide when the weights are uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreEstimator {
    #[default]
    Weighted,
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaylorConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_taylor_eps")]
    pub eps: f64,
}

fn default_taylor_eps() -> f64 {
    1e-3
}

impl Default for TaylorConfig {
    fn default() -> Self {
        TaylorConfig {
            enabled: false,
            eps: default_taylor_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Plain,
    /// Joint training, then a second run from a fresh model initialization
    /// that reuses the learned scorer.
    Retrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdsConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to `batch_size`.
    #[serde(default)]
    pub dev_batch_size: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub reward: RewardMetric,
    #[serde(default)]
    pub estimator: ScoreEstimator,
    #[serde(default)]
    pub taylor: TaylorConfig,
    #[serde(default)]
    pub mode: TrainMode,
    /// Phase-2 steps during which the scorer is held fixed before fine-tuning
    /// resumes. Defaults to a quarter of `steps`.
    #[serde(default)]
    pub retrain_freeze_steps: Option<usize>,
}

fn default_batch_size() -> usize {
    32
}

fn default_steps() -> usize {
    1000
}

impl Default for DdsConfig {
    fn default() -> Self {
        DdsConfig {
            batch_size: default_batch_size(),
            dev_batch_size: None,
            steps: default_steps(),
            reward: RewardMetric::Dot,
            estimator: ScoreEstimator::Weighted,
            taylor: TaylorConfig::default(),
            mode: TrainMode::Plain,
            retrain_freeze_steps: None,
        }
    }
}

impl DdsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("dds.batch_size must be >= 1"));
        }
        if self.dev_batch_size == Some(0) {
            return Err(Error::config("dds.dev_batch_size must be >= 1"));
        }
        if !(self.taylor.eps > 0.0 && self.taylor.eps.is_finite()) {
            return Err(Error::config(format!(
                "dds.taylor.eps must be > 0, got {}",
                self.taylor.eps
            )));
        }
        if self.taylor.enabled && self.reward == RewardMetric::Cosine {
            return Err(Error::config("dds.taylor estimates dot-product rewards; it cannot be combined with reward = \"cosine\""));
        }
        if let Some(f) = self.retrain_freeze_steps {
            if f > self.steps {
                return Err(Error::config(
                    "dds.retrain_freeze_steps must not exceed dds.steps",
                ));
            }
        }
        Ok(())
    }

    pub fn dev_batch(&self) -> usize {
        self.dev_batch_size.unwrap_or(self.batch_size)
    }
}

/// What one step computed.
#[derive(Debug, Clone, PartialEq)]
pub struct DdsStepReport {
    pub step: u64,
    /// `Σ p_i ℓ_i(θ_{t−1})`.
    pub train_loss: f64,
    /// Mean dev-batch loss at `θ_t`.
    pub dev_loss: f64,
    pub rewards: Vec<f64>,
    pub weights: Vec<f64>,
    pub grad_norm_theta: f64,
    pub grad_norm_dev: f64,
    pub grad_norm_psi: f64,
}

/// Mean of the per-example gradients of `batch` at `theta`.
pub fn dev_gradient<M: LossModel>(
    model: &M,
    theta: &[f64],
    batch: &[&LabeledExample],
) -> Result<Vec<f64>> {
    Ok(dev_loss_and_gradient(model, theta, batch)?.1)
}

fn dev_loss_and_gradient<M: LossModel>(
    model: &M,
    theta: &[f64],
    batch: &[&LabeledExample],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("dev batch"));
    }
    let mut sum = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for ex in batch {
        let (l, g) = model.loss_and_grad(theta, &ex.features, ex.label)?;
        loss += l;
        axpy(1.0, &g, &mut sum)?;
    }
    let inv = 1.0 / batch.len() as f64;
    Ok((loss * inv, sum.into_iter().map(|s| s * inv).collect()))
}

/// `r_i = metric(k ⊙ d_θ, g_i)` for each example gradient `g_i`.
pub fn example_rewards(
    dev_grad: &[f64],
    example_grads: &[Vec<f64>],
    kernel: &[f64],
    metric: RewardMetric,
) -> Result<Vec<f64>> {
    check_len("reward kernel", dev_grad.len(), kernel.len())?;
    let scaled = numeric::hadamard(kernel, dev_grad)?;
    example_grads
        .iter()
        .map(|g| metric.apply(&scaled, g))
        .collect()
}

/// `(ℓ(θ + εv) − ℓ(θ)) / ε`, a first-order estimate of `vᵀ∇θℓ`. The shifted
/// parameters live in a scratch vector; `theta` is untouched.
pub fn taylor_reward<M: LossModel>(
    model: &M,
    v: &[f64],
    ex: &LabeledExample,
    theta: &[f64],
    eps: f64,
) -> Result<f64> {
    let base = model.loss(theta, &ex.features, ex.label)?;
    taylor_reward_from(model, v, ex, theta, eps, base)
}

fn taylor_reward_from<M: LossModel>(
    model: &M,
    v: &[f64],
    ex: &LabeledExample,
    theta: &[f64],
    eps: f64,
    base: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!("taylor eps must be > 0, got {eps}")));
    }
    check_len("taylor direction", theta.len(), v.len())?;
    let shadow: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let shifted = model.loss(&shadow, &ex.features, ex.label)?;
    if !shifted.is_finite() {
        return Err(Error::NonFinite("loss at shadow parameters"));
    }
    Ok((shifted - base) / eps)
}

/// Ascent direction for the scorer from per-example rewards.
pub fn scorer_gradient(
    scorer: &ExampleScorer,
    psi: &[f64],
    batch: &[&LabeledExample],
    rewards: &[f64],
    estimator: ScoreEstimator,
) -> Result<Vec<f64>> {
    check_len("rewards", batch.len(), rewards.len())?;
    check_finite("rewards", rewards)?;
    let coeffs: Vec<f64> = match estimator {
        ScoreEstimator::Weighted => {
            let p = scorer.batch_probs(psi, batch)?;
            rewards.iter().zip(&p).map(|(r, p)| r * p).collect()
        }
        ScoreEstimator::BatchMean => {
            let inv = 1.0 / batch.len() as f64;
            rewards.iter().map(|r| r * inv).collect()
        }
    };
    scorer.weighted_logprob_grad(psi, batch, &coeffs)
}

/// Per-step settings independent of the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub reward: RewardMetric,
    pub estimator: ScoreEstimator,
    pub taylor: TaylorConfig,
    /// Leave `ψ` and its optimizer untouched.
    pub hold_scorer: bool,
}

impl From<&DdsConfig> for StepOptions {
    fn from(cfg: &DdsConfig) -> Self {
        StepOptions {
            reward: cfg.reward,
            estimator: cfg.estimator,
            taylor: cfg.taylor,
            hold_scorer: false,
        }
    }
}

/// Weighted loss, weighted gradient, per-example losses, per-example gradients.
type WeightedGradient = (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// `Σ w_i ℓ_i` and `Σ w_i ∇ℓ_i` at `theta`, plus each `∇ℓ_i`.
fn weighted_gradient<M: LossModel>(
    model: &M,
    theta: &[f64],
    batch: &[&LabeledExample],
    weights: &[f64],
) -> Result<WeightedGradient> {
    let mut total = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for (ex, &w) in batch.iter().zip(weights) {
        let (l, g) = model.loss_and_grad(theta, &ex.features, ex.label)?;
        loss += w * l;
        axpy(w, &g, &mut total)?;
        losses.push(l);
        grads.push(g);
    }
    Ok((loss, total, losses, grads))
}

/// One joint update of `theta` and `psi`. See the module docs for the order
/// of operations.
#[allow(clippy::too_many_arguments)]
pub fn dds_train_step<M: LossModel>(
    model: &M,
    scorer: &ExampleScorer,
    theta: &mut [f64],
    psi: &mut [f64],
    opt_theta: &mut Optimizer,
    opt_psi: &mut Optimizer,
    train_batch: &[&LabeledExample],
    dev_batch: &[&LabeledExample],
    opts: &StepOptions,
) -> Result<DdsStepReport> {
    if train_batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let weights = scorer.batch_probs(psi, train_batch)?;
    let (train_loss, g_theta, losses, grads) =
        weighted_gradient(model, theta, train_batch, &weights)?;
    let kernel = opt_theta.reward_kernel();
    let theta_prev = theta.to_vec();
    opt_theta.step(theta, &g_theta)?;

    let (dev_loss, d_theta) = dev_loss_and_gradient(model, theta, dev_batch)?;
    let rewards = if opts.taylor.enabled {
        let v = numeric::hadamard(&kernel, &d_theta)?;
        train_batch
            .iter()
            .zip(&losses)
            .map(|(ex, &base)| {
                taylor_reward_from(model, &v, ex, &theta_prev, opts.taylor.eps, base)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        example_rewards(&d_theta, &grads, &kernel, opts.reward)?
    };

    let mut grad_norm_psi = 0.0;
    if !opts.hold_scorer && !scorer.frozen {
        let d_psi = scorer_gradient(scorer, psi, train_batch, &rewards, opts.estimator)?;
        grad_norm_psi = norm(&d_psi);
        opt_psi.ascend(psi, &d_psi)?;
    }
    let report = DdsStepReport {
        step: opt_theta.state.t,
        train_loss,
        dev_loss,
        rewards,
        weights,
        grad_norm_theta: norm(&g_theta),
        grad_norm_dev: norm(&d_theta),
        grad_norm_psi,
    };
    check_finite(
        "step report",
        &[
            report.train_loss,
            report.dev_loss,
            report.grad_norm_theta,
            report.grad_norm_psi,
        ],
    )?;
    check_finite("step rewards", &report.rewards)?;
    Ok(report)
}

/// One uniformly weighted step, the reference trainer.
pub fn baseline_step<M: LossModel>(
    model: &M,
    theta: &mut [f64],
    opt: &mut Optimizer,
    batch: &[&LabeledExample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let weights = vec![1.0 / batch.len() as f64; batch.len()];
    let (loss, g, _, _) = weighted_gradient(model, theta, batch, &weights)?;
    opt.step(theta, &g)?;
    Ok(loss)
}

/// `b` distinct indices from `0..n` (with replacement when `b > n`).
pub fn sample_batch(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    if b > n {
        return (0..b).map(|_| rng.below(n)).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(b);
    idx
}

/// Mean loss and accuracy of `theta` on a dataset.
pub fn evaluate(model: &MlpClassifier, theta: &[f64], ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in &ds.examples {
        loss += model.loss(theta, &ex.features, ex.label)?;
        if model.predict(theta, &ex.features)? == ex.label {
            correct += 1;
        }
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Softmax of the scores over a whole dataset, so weights sum to 1 across it.
pub fn dataset_weights(scorer: &ExampleScorer, psi: &[f64], ds: &Dataset) -> Result<Vec<f64>> {
    let refs: Vec<&LabeledExample> = ds.examples.iter().collect();
    scorer.batch_probs(psi, &refs)
}

/// Mean dataset weight of corrupted examples over that of clean ones.
/// `None` unless both kinds are present.
pub fn corrupted_weight_ratio(weights: &[f64], corrupted: &[bool]) -> Option<f64> {
    let (mut sc, mut nc, mut sk, mut nk) = (0.0, 0usize, 0.0, 0usize);
    for (&w, &c) in weights.iter().zip(corrupted) {
        if c {
            sc += w;
            nc += 1;
        } else {
            sk += w;
            nk += 1;
        }
    }
    (nc > 0 && nk > 0 && sk > 0.0).then(|| (sc / nc as f64) / (sk / nk as f64))
}

/// Total weight per class.
pub fn weighted_class_distribution(weights: &[f64], ds: &Dataset) -> Vec<f64> {
    let mut q = vec![0.0; ds.classes];
    for (&w, ex) in weights.iter().zip(&ds.examples) {
        q[ex.label] += w;
    }
    q
}

/// Class mass the model is trained on: in-batch weights per class, averaged
/// over `batches` random batches of `batch_size`. Sums to 1.
pub fn batch_class_mass(
    scorer: &ExampleScorer,
    psi: &[f64],
    ds: &Dataset,
    batch_size: usize,
    batches: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if batches == 0 || batch_size == 0 {
        return Err(Error::Empty("class-mass batches"));
    }
    let mut q = vec![0.0; ds.classes];
    for _ in 0..batches {
        let idx = sample_batch(rng, ds.len(), batch_size);
        let batch: Vec<&LabeledExample> = idx.iter().map(|&i| &ds.examples[i]).collect();
        let p = scorer.batch_probs(psi, &batch)?;
        for (ex, w) in batch.iter().zip(&p) {
            q[ex.label] += w;
        }
    }
    for v in &mut q {
        *v /= batches as f64;
    }
    Ok(q)
}

/// One metrics line of a classification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdsRecord {
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<u8>,
    pub train_loss: f64,
    /// On the full dev set after the step.
    pub dev_loss: f64,
    pub dev_acc: f64,
    pub mean_reward: f64,
    pub weights_entropy: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_psi: f64,
}

/// Serializes records as JSON lines.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Everything a classification run needs.
#[derive(Debug, Clone)]
pub struct DdsSetup<'a> {
    pub model: MlpClassifier,
    pub scorer: ExampleScorer,
    pub model_optimizer: OptimizerConfig,
    pub scorer_optimizer: OptimizerConfig,
    pub config: DdsConfig,
    pub seed: u64,
    pub train: &'a Dataset,
    pub dev: &'a Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainerKind {
    Dds,
    Baseline,
}

/// Stepwise driver behind [`dds_train`] and [`baseline_train`]. Train and dev
/// batches come from separate random streams, so the training batches of the
/// two kinds of trainer are identical under the same seed.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    setup: &'a DdsSetup<'a>,
    kind: TrainerKind,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub opt_theta: Optimizer,
    pub opt_psi: Optimizer,
    train_rng: Rng,
    dev_rng: Rng,
    step: u64,
    phase: Option<u8>,
    hold_scorer_until: u64,
}

impl<'a> Trainer<'a> {
    fn build(setup: &'a DdsSetup<'a>, kind: TrainerKind) -> Result<Self> {
        setup.config.validate()?;
        if setup.train.is_empty() || setup.dev.is_empty() {
            return Err(Error::config("training and dev sets must be nonempty"));
        }
        let theta = setup
            .model
            .init(&mut Rng::stream(setup.seed, Stream::ModelInit));
        let psi = setup
            .scorer
            .init(&mut Rng::stream(setup.seed, Stream::ScorerInit));
        Ok(Trainer {
            setup,
            kind,
            opt_theta: Optimizer::new(setup.model_optimizer, theta.len())?,
            opt_psi: Optimizer::new(setup.scorer_optimizer, psi.len())?,
            theta,
            psi,
            train_rng: Rng::stream(setup.seed, Stream::TrainBatches),
            dev_rng: Rng::stream(setup.seed, Stream::DevBatches),
            step: 0,
            phase: None,
            hold_scorer_until: 0,
        })
    }

    pub fn dds(setup: &'a DdsSetup<'a>) -> Result<Self> {
        Self::build(setup, TrainerKind::Dds)
    }

    pub fn baseline(setup: &'a DdsSetup<'a>) -> Result<Self> {
        Self::build(setup, TrainerKind::Baseline)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Fresh model parameters and optimizers for a second phase; the scorer
    /// parameters carry over and are held fixed for `hold_steps` steps.
    fn start_retrain(&mut self, hold_steps: usize) -> Result<()> {
        let s = self.setup;
        self.theta = s.model.init(&mut Rng::stream(s.seed, Stream::RetrainInit));
        self.opt_theta = Optimizer::new(s.model_optimizer, self.theta.len())?;
        self.opt_psi = Optimizer::new(s.scorer_optimizer, self.psi.len())?;
        self.phase = Some(2);
        self.hold_scorer_until = self.step + hold_steps as u64;
        Ok(())
    }

    pub fn step(&mut self) -> Result<DdsRecord> {
        let s = self.setup;
        let train: Vec<&LabeledExample> =
            sample_batch(&mut self.train_rng, s.train.len(), s.config.batch_size)
                .into_iter()
                .map(|i| &s.train.examples[i])
                .collect();
        self.step += 1;
        let (train_loss, mean_reward, weights_entropy, grad_norm_theta, grad_norm_psi) = match self
            .kind
        {
            TrainerKind::Baseline => {
                let b = train.len() as f64;
                let weights = vec![1.0 / b; train.len()];
                let (loss, g, _, _) = weighted_gradient(&s.model, &self.theta, &train, &weights)?;
                self.opt_theta.step(&mut self.theta, &g)?;
                (loss, 0.0, numeric::entropy(&weights), norm(&g), 0.0)
            }
            TrainerKind::Dds => {
                let dev: Vec<&LabeledExample> =
                    sample_batch(&mut self.dev_rng, s.dev.len(), s.config.dev_batch())
                        .into_iter()
                        .map(|i| &s.dev.examples[i])
                        .collect();
                let mut opts = StepOptions::from(&s.config);
                opts.hold_scorer = self.step <= self.hold_scorer_until;
                let r = dds_train_step(
                    &s.model,
                    &s.scorer,
                    &mut self.theta,
                    &mut self.psi,
                    &mut self.opt_theta,
                    &mut self.opt_psi,
                    &train,
                    &dev,
                    &opts,
                )?;
                let mean_reward = r.rewards.iter().sum::<f64>() / r.rewards.len() as f64;
                (
                    r.train_loss,
                    mean_reward,
                    numeric::entropy(&r.weights),
                    r.grad_norm_theta,
                    r.grad_norm_psi,
                )
            }
        };
        let (dev_loss, dev_acc) = evaluate(&s.model, &self.theta, s.dev)?;
        Ok(DdsRecord {
            step: self.step,
            phase: self.phase,
            train_loss,
            dev_loss,
            dev_acc,
            mean_reward,
            weights_entropy,
            grad_norm_theta,
            grad_norm_psi,
        })
    }
}

/// Final state of a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub dev_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    /// `None` for the baseline trainer.
    pub psi: Option<Vec<f64>>,
    pub records: Vec<DdsRecord>,
    pub dev_loss: f64,
    pub dev_acc: f64,
    /// Joint-training result of a retrained run.
    pub phase1: Option<PhaseResult>,
}

fn run(trainer: &mut Trainer<'_>, steps: usize, records: &mut Vec<DdsRecord>) -> Result<()> {
    for _ in 0..steps {
        records.push(trainer.step()?);
    }
    Ok(())
}

/// Runs `config.steps` joint steps, plus a second phase of the same length
/// in retrained mode. Step numbers keep increasing across phases.
pub fn dds_train(setup: &DdsSetup<'_>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::dds(setup)?;
    let mut records = Vec::with_capacity(setup.config.steps);
    let mut phase1 = None;
    if setup.config.mode == TrainMode::Retrained {
        trainer.phase = Some(1);
    }
    run(&mut trainer, setup.config.steps, &mut records)?;
    if setup.config.mode == TrainMode::Retrained {
        let (dev_loss, dev_acc) = evaluate(&setup.model, &trainer.theta, setup.dev)?;
        phase1 = Some(PhaseResult {
            theta: trainer.theta.clone(),
            psi: trainer.psi.clone(),
            dev_loss,
            dev_acc,
        });
        let hold = setup
            .config
            .retrain_freeze_steps
            .unwrap_or(setup.config.steps / 4);
        trainer.start_retrain(hold)?;
        run(&mut trainer, setup.config.steps, &mut records)?;
    }
    let (dev_loss, dev_acc) = evaluate(&setup.model, &trainer.theta, setup.dev)?;
    Ok(TrainOutcome {
        theta: trainer.theta,
        psi: Some(trainer.psi),
        records,
        dev_loss,
        dev_acc,
        phase1,
    })
}

/// Uniformly weighted training with the same initialization and batches as
/// [`dds_train`].
pub fn baseline_train(setup: &DdsSetup<'_>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::baseline(setup)?;
    let mut records = Vec::with_capacity(setup.config.steps);
    run(&mut trainer, setup.config.steps, &mut records)?;
    let (dev_loss, dev_acc) = evaluate(&setup.model, &trainer.theta, setup.dev)?;
    Ok(TrainOutcome {
        theta: trainer.theta,
        psi: None,
        records,
        dev_loss,
        dev_acc,
        phase1: None,
    })
}
