//! The four subcommands. Each writes its outputs into the chosen directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dds_core::data::{
    gen_blobs, gen_group_shift, holdout_split, inject_label_noise, load_csv, write_csv, BlobSpec,
    Dataset, GroupedDataset, LabeledExample,
};
use dds_core::engine::{
    baseline_step, baseline_train, batch_class_mass, corrupted_weight_ratio, dataset_weights,
    dds_train, dds_train_step, sample_batch, scorer_gradient, to_jsonl, DdsSetup, StepOptions,
};
use dds_core::group::{group_dds_train, GroupSetup};
use dds_core::models::{save_params, ExampleScorer, GroupScorer, LossModel, MlpClassifier};
use dds_core::numeric::{hadamard, Rng, Stream};
use dds_core::optim::{Optimizer, OptimizerConfig};
use dds_core::verify::{
    brute_force_bilevel, one_step_bilevel_fd, taylor_error_scan, GradCheckReport, TaylorScan,
    TinyProblem,
};
use log::{debug, info};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, Engine, LoadedConfig, RunConfig};
use crate::CliError;

/// Batches averaged when summarizing the class mass a trained scorer yields.
const PROBE_BATCHES: usize = 200;

/// `dds-core <version> config:<first 12 hex digits of the config hash>`. The
/// hash covers the effective config, including a `--seed` override.
pub fn provenance(config: &RunConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("dds-core {} config:{hex}", env!("CARGO_PKG_VERSION"))
}

fn input_err(e: dds_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(e.into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
    text.push('\n');
    write(path, text)
}

fn require_data(config: &RunConfig) -> Result<&DataConfig, CliError> {
    config
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("data: missing section".into()))
}

/// Train and dev sets for the per-example engines. Randomness: generation on
/// `Data`, the split or separate dev draw on `Split`, corruption on
/// `LabelNoise`.
pub fn flat_data(config: &RunConfig, base_dir: &Path) -> Result<(Dataset, Dataset), CliError> {
    let d = require_data(config)?;
    let seed = config.seed;
    if let Some(spec) = &d.blobs {
        let data = gen_blobs(spec, Rng::derive_seed(seed, Stream::Data)).map_err(input_err)?;
        let split_seed = Rng::derive_seed(seed, Stream::Split);
        let (train, dev) = match d.dev_per_class {
            Some(n) => {
                let dev_spec = BlobSpec {
                    per_class: n,
                    class_counts: None,
                    ..spec.clone()
                };
                (data, gen_blobs(&dev_spec, split_seed).map_err(input_err)?)
            }
            None => holdout_split(&data, d.dev_fraction.unwrap_or(0.1), split_seed)
                .map_err(input_err)?,
        };
        let train = if d.label_noise > 0.0 {
            inject_label_noise(
                &train,
                d.label_noise,
                Rng::derive_seed(seed, Stream::LabelNoise),
            )
            .map_err(input_err)?
        } else {
            train
        };
        return Ok((train, dev));
    }
    let g = grouped_data(config, base_dir)?;
    Ok((g.train, g.dev))
}

/// Grouped data for the group engine, from the shift generator or from CSV
/// files carrying an `instance` column.
pub fn grouped_data(config: &RunConfig, base_dir: &Path) -> Result<GroupedDataset, CliError> {
    let d = require_data(config)?;
    if let Some(spec) = &d.group_shift {
        return gen_group_shift(spec, Rng::derive_seed(config.seed, Stream::Data))
            .map_err(input_err);
    }
    if let Some(c) = &d.csv {
        let train = load_csv(&base_dir.join(&c.train), c.classes, c.groups).map_err(input_err)?;
        let dev = load_csv(
            &base_dir.join(&c.dev),
            Some(train.dataset.classes),
            Some(train.dataset.groups),
        )
        .map_err(input_err)?;
        return GroupedDataset::from_flat(
            train.dataset,
            dev.dataset,
            train.instance_ids.as_deref(),
        )
        .map_err(input_err);
    }
    Err(CliError::Config(
        "engine group_dds needs data.group_shift or data.csv".into(),
    ))
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub engine: &'static str,
    pub seed: u64,
    pub provenance: String,
    pub wall_time_s: f64,
    pub steps: usize,
    pub final_dev_acc: f64,
    pub final_dev_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase1_dev_acc: Option<f64>,
    /// Mean dataset weight of corrupted over clean training examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupted_weight_ratio: Option<f64>,
    /// Per-class share of in-batch weight, averaged over random batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_mass: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_group_probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_probs: Option<Vec<f64>>,
}

/// `train`: metrics.jsonl, summary.json, params.bin and, for the selection
/// engines, scorer.bin.
pub fn train(loaded: &LoadedConfig, out: &Path) -> Result<Summary, CliError> {
    let config = &loaded.config;
    let engine = config
        .engine
        .ok_or_else(|| CliError::Config("engine: missing field `engine`".into()))?;
    let t0 = Instant::now();
    let model_optimizer = config
        .optimizer
        .unwrap_or_else(OptimizerConfig::model_default);
    let scorer_optimizer = config
        .scorer
        .optimizer
        .unwrap_or_else(OptimizerConfig::scorer_default);
    info!("{} run, seed {}", engine.name(), config.seed);
    let mut summary = Summary {
        engine: engine.name(),
        seed: config.seed,
        provenance: provenance(config),
        wall_time_s: 0.0,
        steps: 0,
        final_dev_acc: 0.0,
        final_dev_loss: 0.0,
        phase1_dev_acc: None,
        corrupted_weight_ratio: None,
        class_mass: None,
        initial_group_probs: None,
        group_probs: None,
    };
    match engine {
        Engine::Dds | Engine::Baseline => {
            let (train, dev) = flat_data(config, &loaded.base_dir)?;
            let scorer = if config.scorer.sees_label {
                ExampleScorer::with_label(
                    train.dim,
                    config.scorer.hidden.unwrap_or(16),
                    train.classes,
                )
            } else {
                ExampleScorer::new(train.dim, config.scorer.hidden.unwrap_or(16))
            }
            .frozen(config.scorer.frozen);
            let setup = DdsSetup {
                model: MlpClassifier::new(train.dim, config.model.hidden, train.classes),
                scorer,
                model_optimizer,
                scorer_optimizer,
                config: config.dds.clone(),
                seed: config.seed,
                train: &train,
                dev: &dev,
            };
            let outcome = if engine == Engine::Dds {
                dds_train(&setup)?
            } else {
                baseline_train(&setup)?
            };
            log_progress(outcome.records.iter().map(|r| (r.step, r.dev_acc)));
            write(&out.join("metrics.jsonl"), to_jsonl(&outcome.records)?)?;
            save_params(&out.join("params.bin"), &outcome.theta)?;
            summary.steps = outcome.records.len();
            summary.final_dev_acc = outcome.dev_acc;
            summary.final_dev_loss = outcome.dev_loss;
            summary.phase1_dev_acc = outcome.phase1.as_ref().map(|p| p.dev_acc);
            if let Some(psi) = &outcome.psi {
                save_params(&out.join("scorer.bin"), psi)?;
                let w = dataset_weights(&setup.scorer, psi, &train)?;
                summary.corrupted_weight_ratio = corrupted_weight_ratio(&w, &train.corrupted);
                let mut probe = Rng::stream(config.seed, Stream::Probe);
                summary.class_mass = Some(batch_class_mass(
                    &setup.scorer,
                    psi,
                    &train,
                    config.dds.batch_size,
                    PROBE_BATCHES,
                    &mut probe,
                )?);
            }
        }
        Engine::GroupDds => {
            let data = grouped_data(config, &loaded.base_dir)?;
            let setup = GroupSetup {
                model: MlpClassifier::new(data.train.dim, config.model.hidden, data.train.classes),
                scorer: GroupScorer::new(data.train.groups, config.scorer.hidden.unwrap_or(0)),
                model_optimizer,
                scorer_optimizer,
                config: config.group_dds.clone(),
                seed: config.seed,
                data: &data,
            };
            let outcome = group_dds_train(&setup)?;
            log_progress(outcome.records.iter().map(|r| (r.step, r.dev_acc)));
            write(&out.join("metrics.jsonl"), to_jsonl(&outcome.records)?)?;
            save_params(&out.join("params.bin"), &outcome.theta)?;
            save_params(&out.join("scorer.bin"), &outcome.omega)?;
            summary.steps = outcome.records.last().map_or(0, |r| r.step as usize);
            summary.final_dev_acc = outcome.dev_acc;
            summary.final_dev_loss = outcome.dev_loss;
            summary.group_probs = Some(outcome.records.last().map_or_else(
                || outcome.initial_group_probs.clone(),
                |r| r.group_probs.clone(),
            ));
            summary.initial_group_probs = Some(outcome.initial_group_probs);
        }
    }
    summary.wall_time_s = t0.elapsed().as_secs_f64();
    write_json(&out.join("summary.json"), &summary)?;
    info!(
        "done in {:.2}s, dev accuracy {:.4}",
        summary.wall_time_s, summary.final_dev_acc
    );
    Ok(summary)
}

fn log_progress(records: impl Iterator<Item = (u64, f64)>) {
    for (step, acc) in records.filter(|(s, _)| s % 100 == 0) {
        debug!("step {step}: dev accuracy {acc:.4}");
    }
}

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub seed: u64,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub provenance: String,
    pub hypergradient: Vec<CheckResult>,
    pub taylor: TaylorScan,
    pub taylor_tolerance: f64,
    pub pass: bool,
}

/// `gradcheck`: the engine's scorer gradient against central differences of
/// the one-step dev loss, and the Taylor reward error scan.
pub fn gradcheck(loaded: &LoadedConfig, out: &Path) -> Result<GradcheckReport, CliError> {
    let config = &loaded.config;
    let g = &config.gradcheck;
    let opt_config = config
        .optimizer
        .unwrap_or_else(|| OptimizerConfig::sgd(0.5));
    let model = MlpClassifier::new(g.dim, g.hidden, g.classes);
    let scorer = ExampleScorer::new(g.dim, g.scorer_hidden);
    let mut checks = Vec::with_capacity(g.checks);
    let mut taylor = None;
    for i in 0..g.checks as u64 {
        let seed = config.seed.wrapping_add(i);
        let mut rng = Rng::stream(seed, Stream::ModelInit);
        let mut theta = model.init(&mut rng);
        let psi = scorer.init(&mut rng);
        let mut data_rng = Rng::stream(seed, Stream::Data);
        let pool: Vec<LabeledExample> = (0..g.batch_size + g.dev_batch_size + 32)
            .map(|k| {
                LabeledExample::new(
                    (0..g.dim).map(|_| data_rng.normal()).collect(),
                    k % g.classes,
                    0,
                )
            })
            .collect();
        let mut opt = Optimizer::new(opt_config, theta.len())?;
        let mut warm = Rng::stream(seed, Stream::Warmup);
        for _ in 0..g.warmup_steps {
            let batch: Vec<&LabeledExample> = sample_batch(&mut warm, pool.len(), g.batch_size)
                .into_iter()
                .map(|k| &pool[k])
                .collect();
            baseline_step(&model, &mut theta, &mut opt, &batch)?;
        }
        let train: Vec<&LabeledExample> = pool[..g.batch_size].iter().collect();
        let dev: Vec<&LabeledExample> = pool[g.batch_size..g.batch_size + g.dev_batch_size]
            .iter()
            .collect();
        let fd = one_step_bilevel_fd(&model, &scorer, &theta, &psi, &train, &dev, &opt, g.h)?;
        let neg_fd: Vec<f64> = fd.iter().map(|v| -v).collect();

        let (mut t, mut p) = (theta.clone(), psi.clone());
        let mut ot = opt.clone();
        let mut op = Optimizer::new(OptimizerConfig::sgd(1.0), psi.len())?;
        let opts = StepOptions {
            hold_scorer: true,
            ..StepOptions::from(&config.dds)
        };
        let step = dds_train_step(
            &model, &scorer, &mut t, &mut p, &mut ot, &mut op, &train, &dev, &opts,
        )?;
        let analytic = scorer_gradient(&scorer, &psi, &train, &step.rewards, config.dds.estimator)?;
        checks.push(CheckResult {
            seed,
            report: GradCheckReport::new(analytic, neg_fd, g.tolerance)?,
        });

        if taylor.is_none() {
            let mut d = vec![0.0; theta.len()];
            for ex in &dev {
                let grad = model.loss_and_grad(&t, &ex.features, ex.label)?.1;
                d.iter_mut()
                    .zip(&grad)
                    .for_each(|(a, b)| *a += b / dev.len() as f64);
            }
            let v = hadamard(&opt.reward_kernel(), &d)?;
            taylor = Some(taylor_error_scan(
                &model,
                &train,
                &theta,
                &v,
                &g.taylor_eps,
            )?);
        }
    }
    let taylor = taylor.expect("at least one check");
    let taylor_ok = taylor
        .max_rel_error
        .last()
        .is_some_and(|e| *e <= g.taylor_tolerance);
    let report = GradcheckReport {
        provenance: provenance(config),
        pass: taylor_ok && checks.iter().all(|c| c.report.pass),
        hypergradient: checks,
        taylor,
        taylor_tolerance: g.taylor_tolerance,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct OracleReport {
    pub provenance: String,
    pub best_weights: Vec<f64>,
    pub best_dev_loss: f64,
    pub landscape: Vec<dds_core::verify::LandscapePoint>,
}

/// `oracle`: exhaustive search over example weights on the configured tiny
/// problem.
pub fn oracle(loaded: &LoadedConfig, out: &Path) -> Result<OracleReport, CliError> {
    let config = &loaded.config;
    let o = &config.oracle;
    let to_examples = |v: &[crate::config::ExampleSpec]| {
        v.iter()
            .map(|e| LabeledExample::new(e.features.clone(), e.label, 0))
            .collect()
    };
    let problem = TinyProblem {
        train: to_examples(&o.train),
        dev: to_examples(&o.dev),
        classes: o.classes,
        l2: o.l2,
    };
    let dim = o.train.first().map_or(0, |e| e.features.len());
    if o.train
        .iter()
        .chain(&o.dev)
        .any(|e| e.features.len() != dim || e.label >= o.classes)
    {
        return Err(CliError::Config(
            "oracle: examples need equal feature lengths and labels below classes".into(),
        ));
    }
    let result = brute_force_bilevel(&problem, o.grid_resolution).map_err(|e| {
        if e.is_config() {
            input_err(e)
        } else {
            CliError::Runtime(e)
        }
    })?;
    let report = OracleReport {
        provenance: provenance(config),
        best_weights: result.best_weights,
        best_dev_loss: result.best_dev_loss,
        landscape: result.landscape,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct DataSidecar {
    pub provenance: String,
    pub seed: u64,
    pub data: DataConfig,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub corrupted_examples: usize,
    pub files: Vec<PathBuf>,
}

/// `gen-data`: train.csv, dev.csv and data.json describing how they were made.
pub fn gen_data(loaded: &LoadedConfig, out: &Path) -> Result<DataSidecar, CliError> {
    let config = &loaded.config;
    let data = require_data(config)?.clone();
    let (train, dev, ids) = if data.group_shift.is_some() {
        let g = grouped_data(config, &loaded.base_dir)?;
        let ids = g.instance_ids();
        (g.train, g.dev, Some(ids))
    } else {
        let (train, dev) = flat_data(config, &loaded.base_dir)?;
        (train, dev, None)
    };
    write_csv(&out.join("train.csv"), &train, ids.as_deref())?;
    write_csv(&out.join("dev.csv"), &dev, None)?;
    let sidecar = DataSidecar {
        provenance: provenance(config),
        seed: config.seed,
        data,
        train_examples: train.len(),
        dev_examples: dev.len(),
        corrupted_examples: train.corrupted.iter().filter(|c| **c).count(),
        files: vec!["train.csv".into(), "dev.csv".into()],
    };
    write_json(&out.join("data.json"), &sidecar)?;
    Ok(sidecar)
}
