//! Group-level data selection over several source groups.
//!
//! Each target instance (a label) has one example in every available source
//! group. A round of training
//!
//! 1. draws `K` instances uniformly and picks a group for each from the
//!    scorer's masked softmax `g(· | availability; ω)`;
//! 2. takes one model step per drawn example and folds the clipped example
//!    gradient into that group's EMA,
//!    `grad[S_i] ← α1 · grad[S_i] + α2 · ∇θ ℓ`;
//! 3. recomputes the dev gradient `grad[S]` as a fresh dev-batch mean;
//! 4. scores each group by `grad_vec[i] = cos(grad[S_i], grad[S])`;
//! 5. runs `E` scorer updates, each ascending
//!    `(1/B) Σ_j Σ_{i available} grad_vec[i] ∇ω log g(i | a_j; ω)`.

use serde::{Deserialize, Serialize};

use crate::data::{GroupedDataset, LabeledExample};
use crate::engine::{dev_gradient, evaluate, sample_batch, RewardMetric};
use crate::error::{Error, Result};
use crate::models::{GroupScorer, LossModel, MlpClassifier};
use crate::numeric::{self, categorical_sample, check_len, norm, Rng, Stream};
use crate::optim::{Optimizer, OptimizerConfig};

/// Per-group gradient EMAs and the current dev gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradientTable {
    pub grads: Vec<Vec<f64>>,
    pub grad_dev: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl GroupGradientTable {
    pub fn new(groups: usize, len: usize, alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha1) || !(alpha2 >= 0.0 && alpha2.is_finite()) {
            return Err(Error::config(format!(
                "EMA factors need alpha1 in [0, 1] and alpha2 >= 0, got {alpha1}, {alpha2}"
            )));
        }
        Ok(GroupGradientTable {
            grads: vec![vec![0.0; len]; groups],
            grad_dev: vec![0.0; len],
            alpha1,
            alpha2,
        })
    }

    /// `grads[i] ← α1 · grads[i] + α2 · grad`; other entries are untouched.
    pub fn ema_update(&mut self, i: usize, grad: &[f64]) -> Result<()> {
        let len = self.grads.len();
        let entry = self
            .grads
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len })?;
        check_len("EMA gradient", entry.len(), grad.len())?;
        for (e, g) in entry.iter_mut().zip(grad) {
            *e = self.alpha1 * *e + self.alpha2 * g;
        }
        Ok(())
    }

    /// `metric(grads[i], grad_dev)` per group. Zero-norm entries score 0
    /// under cosine.
    pub fn group_rewards(&self, metric: RewardMetric) -> Result<Vec<f64>> {
        self.grads
            .iter()
            .map(|g| metric.apply(g, &self.grad_dev))
            .collect()
    }
}

/// Scales `g` down to norm `max_norm` when it is longer.
pub fn clip_norm(g: &mut [f64], max_norm: f64) {
    let n = norm(g);
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDdsConfig {
    /// Total model steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Model steps per round.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Scorer updates per round.
    #[serde(default = "default_e")]
    pub e: usize,
    /// Instances per scorer update.
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_metric")]
    pub metric: RewardMetric,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    /// Defaults to `1 − alpha1`.
    #[serde(default)]
    pub alpha2: Option<f64>,
    /// Gradient norm cap applied before EMA insertion.
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_b")]
    pub dev_batch_size: usize,
    /// Initial output bias of the scorer.
    #[serde(default)]
    pub prior_logits: Option<Vec<f64>>,
}

fn default_steps() -> usize {
    2000
}
fn default_k() -> usize {
    200
}
fn default_e() -> usize {
    5
}
fn default_b() -> usize {
    64
}
fn default_metric() -> RewardMetric {
    RewardMetric::Cosine
}
fn default_alpha1() -> f64 {
    0.999
}
fn default_clip() -> f64 {
    5.0
}

impl Default for GroupDdsConfig {
    fn default() -> Self {
        GroupDdsConfig {
            steps: default_steps(),
            k: default_k(),
            e: default_e(),
            b: default_b(),
            metric: default_metric(),
            alpha1: default_alpha1(),
            alpha2: None,
            clip: default_clip(),
            dev_batch_size: default_b(),
            prior_logits: None,
        }
    }
}

impl GroupDdsConfig {
    pub fn alpha2(&self) -> f64 {
        self.alpha2.unwrap_or(1.0 - self.alpha1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.e == 0 || self.b == 0 || self.dev_batch_size == 0 {
            return Err(Error::config(
                "group_dds.k, e, b and dev_batch_size must all be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.alpha1) {
            return Err(Error::config(format!(
                "group_dds.alpha1 must be in [0, 1), got {}",
                self.alpha1
            )));
        }
        if !(self.alpha2() >= 0.0) {
            return Err(Error::config("group_dds.alpha2 must be >= 0"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("group_dds.clip must be > 0"));
        }
        Ok(())
    }
}

/// One drawn training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub instance: usize,
    pub group: usize,
    /// Index into the training set.
    pub example: usize,
}

/// `k` instances drawn uniformly, each paired with a group sampled from the
/// scorer. Consumes exactly two draws per pair.
pub fn load_data(
    scorer: &GroupScorer,
    omega: &[f64],
    data: &GroupedDataset,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Draw>> {
    if k == 0 {
        return Err(Error::config("load_data needs k >= 1"));
    }
    if data.instances.is_empty() {
        return Err(Error::Empty("grouped dataset"));
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let instance = rng.below(data.instances.len());
        let inst = &data.instances[instance];
        let probs = scorer.probs(omega, &inst.availability())?;
        let group = categorical_sample(&probs, rng)?;
        let example = inst.members[group].ok_or(Error::Unavailable(group))?;
        out.push(Draw {
            instance,
            group,
            example,
        });
    }
    Ok(out)
}

/// `(1/B) Σ_j Σ_{i available} grad_vec[i] ∇ω log g(i | a_j; ω)` over the
/// given instances.
pub fn group_scorer_gradient(
    scorer: &GroupScorer,
    omega: &[f64],
    data: &GroupedDataset,
    instances: &[usize],
    grad_vec: &[f64],
) -> Result<Vec<f64>> {
    check_len("grad_vec", scorer.groups(), grad_vec.len())?;
    let mut d = vec![0.0; omega.len()];
    for &j in instances {
        let inst = &data.instances[j];
        let avail = inst.availability();
        let coeffs: Vec<f64> = grad_vec
            .iter()
            .zip(&avail)
            .map(|(&c, &a)| if a != 0.0 { c } else { 0.0 })
            .collect();
        numeric::axpy(
            1.0,
            &scorer.weighted_logprob_grad(omega, &avail, &coeffs)?,
            &mut d,
        )?;
    }
    let inv = 1.0 / instances.len() as f64;
    Ok(d.into_iter().map(|v| v * inv).collect())
}

/// `e` ascent steps on the scorer, each on `b` instances drawn uniformly
/// with replacement.
#[allow(clippy::too_many_arguments)]
pub fn scorer_inner_loop(
    scorer: &GroupScorer,
    omega: &mut [f64],
    opt: &mut Optimizer,
    data: &GroupedDataset,
    grad_vec: &[f64],
    e: usize,
    b: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if e == 0 || b == 0 {
        return Err(Error::config("scorer inner loop needs e, b >= 1"));
    }
    let mut last_norm = 0.0;
    for _ in 0..e {
        let picks: Vec<usize> = (0..b).map(|_| rng.below(data.instances.len())).collect();
        let d = group_scorer_gradient(scorer, omega, data, &picks, grad_vec)?;
        last_norm = norm(&d);
        opt.ascend(omega, &d)?;
    }
    Ok(last_norm)
}

/// Scorer distribution averaged over all instances.
pub fn mean_group_probs(
    scorer: &GroupScorer,
    omega: &[f64],
    data: &GroupedDataset,
) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; scorer.groups()];
    for inst in &data.instances {
        numeric::axpy(1.0, &scorer.probs(omega, &inst.availability())?, &mut mean)?;
    }
    let inv = 1.0 / data.instances.len() as f64;
    Ok(mean.into_iter().map(|v| v * inv).collect())
}

/// One metrics line per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub round: u64,
    /// Model steps taken so far.
    pub step: u64,
    /// Mean loss of the round's drawn examples before each step.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc: f64,
    /// After the round's scorer updates.
    pub group_probs: Vec<f64>,
    pub grad_vec: Vec<f64>,
    pub grad_norm_omega: f64,
}

#[derive(Debug, Clone)]
pub struct GroupSetup<'a> {
    pub model: MlpClassifier,
    pub scorer: GroupScorer,
    pub model_optimizer: OptimizerConfig,
    pub scorer_optimizer: OptimizerConfig,
    pub config: GroupDdsConfig,
    pub seed: u64,
    pub data: &'a GroupedDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub initial_group_probs: Vec<f64>,
    pub records: Vec<GroupRecord>,
    pub table: GroupGradientTable,
    pub dev_loss: f64,
    pub dev_acc: f64,
}

/// Alternates model rounds and scorer updates until `config.steps` model
/// steps have been taken; the last round may be shorter than `k`.
pub fn group_dds_train(setup: &GroupSetup<'_>) -> Result<GroupOutcome> {
    let cfg = &setup.config;
    cfg.validate()?;
    let data = setup.data;
    let n = setup.scorer.groups();
    if data.train.groups != n {
        return Err(Error::config(format!(
            "scorer covers {n} groups but the data has {}",
            data.train.groups
        )));
    }
    if data.dev.is_empty() {
        return Err(Error::config("group training needs a nonempty dev set"));
    }
    let model = &setup.model;
    let mut theta = model.init(&mut Rng::stream(setup.seed, Stream::ModelInit));
    let mut omega = setup.scorer.init(
        &mut Rng::stream(setup.seed, Stream::ScorerInit),
        cfg.prior_logits.as_deref(),
    )?;
    let mut opt_theta = Optimizer::new(setup.model_optimizer, theta.len())?;
    let mut opt_omega = Optimizer::new(setup.scorer_optimizer, omega.len())?;
    let mut load_rng = Rng::stream(setup.seed, Stream::GroupLoad);
    let mut inner_rng = Rng::stream(setup.seed, Stream::GroupInner);
    let mut dev_rng = Rng::stream(setup.seed, Stream::DevBatches);
    let mut table = GroupGradientTable::new(n, theta.len(), cfg.alpha1, cfg.alpha2())?;
    let initial_group_probs = mean_group_probs(&setup.scorer, &omega, data)?;

    let mut records = Vec::new();
    let mut taken = 0usize;
    let mut round = 0u64;
    while taken < cfg.steps {
        round += 1;
        let k = cfg.k.min(cfg.steps - taken);
        let draws = load_data(&setup.scorer, &omega, data, k, &mut load_rng)?;
        let mut train_loss = 0.0;
        for d in &draws {
            let ex = &data.train.examples[d.example];
            let (loss, g) = model.loss_and_grad(&theta, &ex.features, ex.label)?;
            train_loss += loss;
            let mut clipped = g.clone();
            clip_norm(&mut clipped, cfg.clip);
            table.ema_update(d.group, &clipped)?;
            opt_theta.step(&mut theta, &g)?;
        }
        taken += k;

        let dev_batch: Vec<&LabeledExample> =
            sample_batch(&mut dev_rng, data.dev.len(), cfg.dev_batch_size)
                .into_iter()
                .map(|i| &data.dev.examples[i])
                .collect();
        table.grad_dev = dev_gradient(model, &theta, &dev_batch)?;
        let grad_vec = table.group_rewards(cfg.metric)?;
        let grad_norm_omega = scorer_inner_loop(
            &setup.scorer,
            &mut omega,
            &mut opt_omega,
            data,
            &grad_vec,
            cfg.e,
            cfg.b,
            &mut inner_rng,
        )?;

        let (dev_loss, dev_acc) = evaluate(model, &theta, &data.dev)?;
        records.push(GroupRecord {
            round,
            step: taken as u64,
            train_loss: train_loss / k as f64,
            dev_loss,
            dev_acc,
            group_probs: mean_group_probs(&setup.scorer, &omega, data)?,
            grad_vec,
            grad_norm_omega,
        });
    }
    let (dev_loss, dev_acc) = evaluate(model, &theta, &data.dev)?;
    Ok(GroupOutcome {
        theta,
        omega,
        initial_group_probs,
        records,
        table,
        dev_loss,
        dev_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_group_shift, Dataset, GroupShiftSpec, TargetInstance};
    use crate::numeric::Rng;
    use proptest::prelude::*;

    #[test]
    fn ema_recurrences() {
        let mut t = GroupGradientTable::new(2, 1, 0.5, 0.5).unwrap();
        t.ema_update(0, &[2.0]).unwrap();
        assert_eq!(t.grads[0], vec![1.0]);
        t.ema_update(0, &[4.0]).unwrap();
        assert_eq!(t.grads[0], vec![2.5]);
        assert_eq!(t.grads[1], vec![0.0]);

        let mut latest = GroupGradientTable::new(1, 2, 0.0, 1.0).unwrap();
        latest.ema_update(0, &[1.0, 2.0]).unwrap();
        latest.ema_update(0, &[-3.0, 0.5]).unwrap();
        assert_eq!(latest.grads[0], vec![-3.0, 0.5]);

        let mut frozen = GroupGradientTable::new(1, 1, 1.0, 0.0).unwrap();
        frozen.ema_update(0, &[7.0]).unwrap();
        assert_eq!(frozen.grads[0], vec![0.0]);
        assert!(matches!(
            frozen.ema_update(1, &[1.0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn reward_cases() {
        let mut t = GroupGradientTable::new(3, 2, 0.0, 1.0).unwrap();
        assert_eq!(t.group_rewards(RewardMetric::Cosine).unwrap(), vec![0.0; 3]);
        t.grad_dev = vec![1.0, 2.0];
        t.grads = vec![vec![1.0, 2.0], vec![-2.0, 1.0], vec![3.0, 6.0]];
        let r = t.group_rewards(RewardMetric::Cosine).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12 && (r[2] - 1.0).abs() < 1e-12);
        assert_eq!(
            t.group_rewards(RewardMetric::Dot).unwrap(),
            vec![5.0, 0.0, 15.0]
        );
    }

    fn always_available(groups: usize, count: usize) -> GroupedDataset {
        let mut examples = Vec::new();
        let mut instances = Vec::new();
        for j in 0..count {
            let members = (0..groups)
                .map(|g| {
                    examples.push(LabeledExample::new(vec![j as f64, g as f64], j % 2, g));
                    Some(examples.len() - 1)
                })
                .collect();
            instances.push(TargetInstance {
                label: j % 2,
                members,
            });
        }
        let train = Dataset::new(examples, 2, 2, groups, "test").unwrap();
        let dev = Dataset::new(
            vec![LabeledExample::new(vec![0.0, 0.0], 0, 0)],
            2,
            2,
            groups,
            "test",
        )
        .unwrap();
        GroupedDataset {
            train,
            instances,
            dev,
        }
    }

    #[test]
    fn load_data_respects_availability() {
        let mut data = always_available(3, 4);
        for inst in &mut data.instances {
            inst.members[0] = None;
            inst.members[1] = None;
        }
        let scorer = GroupScorer::new(3, 0);
        let omega = scorer.init(&mut Rng::new(0), None).unwrap();
        let draws = load_data(&scorer, &omega, &data, 50, &mut Rng::new(1)).unwrap();
        assert!(draws.iter().all(|d| d.group == 2));
        assert!(load_data(&scorer, &omega, &data, 0, &mut Rng::new(1))
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn uniform_scorer_samples_evenly() {
        let data = always_available(2, 10);
        let scorer = GroupScorer::new(2, 0);
        let omega = vec![0.0; scorer.num_params()];
        let draws = load_data(&scorer, &omega, &data, 10_000, &mut Rng::new(7)).unwrap();
        let frac = draws.iter().filter(|d| d.group == 1).count() as f64 / 1e4;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn inner_loop_cases() {
        let data = always_available(2, 6);
        let scorer = GroupScorer::new(2, 0);
        let zero = vec![0.0; scorer.num_params()];

        let mut omega = zero.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), omega.len()).unwrap();
        scorer_inner_loop(
            &scorer,
            &mut omega,
            &mut opt,
            &data,
            &[0.0, 0.0],
            3,
            4,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(omega, zero);

        let avail = [1.0, 1.0];
        let mut omega = zero.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), omega.len()).unwrap();
        scorer_inner_loop(
            &scorer,
            &mut omega,
            &mut opt,
            &data,
            &[1.0, -1.0],
            1,
            4,
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(scorer.probs(&omega, &avail).unwrap()[0] > 0.5);

        let d = group_scorer_gradient(&scorer, &zero, &data, &[0, 1, 2], &[0.7, 0.7]).unwrap();
        assert!(norm(&d) < 1e-10);
    }

    #[test]
    fn unavailable_groups_contribute_nothing() {
        let mut data = always_available(3, 2);
        data.instances[0].members[2] = None;
        let scorer = GroupScorer::new(3, 2);
        let omega = scorer.init(&mut Rng::new(3), None).unwrap();
        let a = group_scorer_gradient(&scorer, &omega, &data, &[0], &[0.2, 0.5, 9.0]).unwrap();
        let b = group_scorer_gradient(&scorer, &omega, &data, &[0], &[0.2, 0.5, -4.0]).unwrap();
        assert_eq!(a, b);
    }

    fn shift_data(groups: usize, seed: u64) -> GroupedDataset {
        gen_group_shift(
            &GroupShiftSpec {
                groups,
                dim: 2,
                classes: 2,
                instances_per_class: 30,
                dev_per_class: 10,
                spread: 1.0,
                separation: 4.0,
                shift_scale: 3.0,
                dev_group: 0,
                availability_dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    fn setup(data: &GroupedDataset, steps: usize) -> GroupSetup<'_> {
        GroupSetup {
            model: MlpClassifier::new(2, 4, 2),
            scorer: GroupScorer::new(data.train.groups, 0),
            model_optimizer: OptimizerConfig::adam(0.01),
            scorer_optimizer: OptimizerConfig::adam(0.05),
            config: GroupDdsConfig {
                steps,
                k: 20,
                e: 2,
                b: 8,
                dev_batch_size: 8,
                ..GroupDdsConfig::default()
            },
            seed: 9,
            data,
        }
    }

    #[test]
    fn single_group_ignores_scorer() {
        let data = shift_data(1, 0);
        let a = group_dds_train(&setup(&data, 100)).unwrap();
        let mut s = setup(&data, 100);
        s.config.prior_logits = Some(vec![3.0]);
        let b = group_dds_train(&s).unwrap();
        assert_eq!(a.theta, b.theta);
        assert!(a.records.iter().all(|r| r.group_probs == vec![1.0]));
    }

    #[test]
    fn rounds_are_simplices_and_deterministic() {
        let data = shift_data(3, 1);
        let a = group_dds_train(&setup(&data, 90)).unwrap();
        let b = group_dds_train(&setup(&data, 90)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 5);
        assert_eq!(a.records.last().unwrap().step, 90);
        for r in &a.records {
            assert!((r.group_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.grad_vec.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn ema_stays_bounded_under_clipping() {
        let data = shift_data(2, 4);
        let mut s = setup(&data, 200);
        s.config.alpha1 = 0.9;
        s.config.clip = 0.5;
        let out = group_dds_train(&s).unwrap();
        let bound = out.table.alpha2 * s.config.clip / (1.0 - out.table.alpha1);
        assert!(out.table.grads.iter().all(|g| norm(g) <= bound + 1e-12));
    }

    proptest! {
        #[test]
        fn scorer_gradient_is_linear(c in prop::collection::vec(-1f64..1.0, 3), scale in 0.01f64..10.0) {
            let data = always_available(3, 3);
            let scorer = GroupScorer::new(3, 2);
            let omega = scorer.init(&mut Rng::new(5), Some(&[0.3, -0.2, 0.1])).unwrap();
            let scaled: Vec<f64> = c.iter().map(|v| v * scale).collect();
            let a = group_scorer_gradient(&scorer, &omega, &data, &[0, 1, 2], &c).unwrap();
            let b = group_scorer_gradient(&scorer, &omega, &data, &[0, 1, 2], &scaled).unwrap();
            let (na, nb) = (norm(&a), norm(&b));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x * scale - y).abs() <= 1e-10 * (1.0 + y.abs()));
                if na > 1e-12 {
                    prop_assert!((x / na - y / nb).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn cosine_rewards_ignore_dev_scale(g in prop::collection::vec(-2f64..2.0, 4), d in prop::collection::vec(-2f64..2.0, 4), s in 0.1f64..100.0) {
            let mut t = GroupGradientTable::new(1, 4, 0.0, 1.0).unwrap();
            t.grads[0] = g;
            t.grad_dev = d.clone();
            let a = t.group_rewards(RewardMetric::Cosine).unwrap();
            t.grad_dev = d.iter().map(|v| v * s).collect();
            let b = t.group_rewards(RewardMetric::Cosine).unwrap();
            prop_assert!((a[0] - b[0]).abs() <= 1e-12);
        }
    }
}
