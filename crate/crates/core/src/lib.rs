//! Learning which training data to trust by aligning training gradients with
//! a held-out dev set.
//!
//! A scorer network assigns weights to training examples (or to whole source
//! groups). After each model step, examples whose gradients point the same
//! way as the dev-set gradient are rewarded, and the scorer is pushed toward
//! them by a score-function update.
//!
//! * [`engine`]: per-example selection for classification.
//! * [`group`]: selection over source groups with gradient EMAs.
//! * [`verify`]: finite-difference and brute-force oracles.
//! * [`data`], [`models`], [`optim`], [`numeric`]: supporting pieces.
//!
//! ```
//! use dds_core::data::{gen_blobs, holdout_split, BlobSpec};
//! use dds_core::engine::{dds_train, DdsConfig, DdsSetup};
//! use dds_core::models::{ExampleScorer, MlpClassifier};
//! use dds_core::optim::OptimizerConfig;
//!
//! let data = gen_blobs(&BlobSpec::new(2, 2, 50, 1.0), 0)?;
//! let (train, dev) = holdout_split(&data, 0.1, 1)?;
//! let setup = DdsSetup {
//!     model: MlpClassifier::new(2, 8, 2),
//!     scorer: ExampleScorer::new(2, 8),
//!     model_optimizer: OptimizerConfig::adam(0.01),
//!     scorer_optimizer: OptimizerConfig::scorer_default(),
//!     config: DdsConfig { batch_size: 16, steps: 50, ..DdsConfig::default() },
//!     seed: 7,
//!     train: &train,
//!     dev: &dev,
//! };
//! let out = dds_train(&setup)?;
//! assert_eq!(out.records.len(), 50);
//! # Ok::<(), dds_core::Error>(())
//! ```

// `!(x > 0.0)` is the intended spelling: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
pub mod error;
pub mod group;
pub mod models;
pub mod numeric;
pub mod optim;
pub mod verify;

pub use error::{Error, Result};
