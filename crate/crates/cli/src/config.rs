//! Run configuration. One TOML file per run; it is parsed and validated in
//! full before any computation starts, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use dds_core::data::{BlobSpec, GroupShiftSpec};
use dds_core::engine::DdsConfig;
use dds_core::group::GroupDdsConfig;
use dds_core::optim::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Version of the schema below; bumped on any incompatible change.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Dds,
    GroupDds,
    Baseline,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Dds => "dds",
            Engine::GroupDds => "group_dds",
            Engine::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Required by `train`.
    #[serde(default)]
    pub engine: Option<Engine>,
    #[serde(default)]
    pub seed: u64,
    /// Required by `train` and `gen-data`.
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    /// Model optimizer. `train` defaults to Adam at 1e-3, `gradcheck` to SGD
    /// at 0.5.
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub dds: DdsConfig,
    #[serde(default)]
    pub group_dds: GroupDdsConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

/// Exactly one of `blobs`, `group_shift` and `csv` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub blobs: Option<BlobSpec>,
    #[serde(default)]
    pub group_shift: Option<GroupShiftSpec>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    /// Fraction of training labels to corrupt (blobs only).
    #[serde(default)]
    pub label_noise: f64,
    /// Blobs: hold out this fraction of the generated data as the dev set.
    /// The default when `dev_per_class` is absent is 0.1.
    #[serde(default)]
    pub dev_fraction: Option<f64>,
    /// Blobs: draw a separate balanced dev set with this many per class.
    #[serde(default)]
    pub dev_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub groups: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_hidden")]
    pub hidden: usize,
}

fn default_model_hidden() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_model_hidden(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    /// Hidden width; defaults to 16 for the example scorer and 0 (a bias
    /// vector over groups) for the group scorer.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Constant zero scores, i.e. uniform weights.
    #[serde(default)]
    pub frozen: bool,
    /// Append a one-hot label to the scorer input.
    #[serde(default)]
    pub sees_label: bool,
    /// Defaults to Adam at 1e-4.
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub scorer_hidden: usize,
    pub batch_size: usize,
    pub dev_batch_size: usize,
    /// Independent problems, seeded `seed, seed + 1, ...`.
    pub checks: usize,
    /// Uniformly weighted model steps before the checked step, so optimizer
    /// state is nontrivial.
    pub warmup_steps: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Strictly descending.
    pub taylor_eps: Vec<f64>,
    pub taylor_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            dim: 2,
            hidden: 4,
            classes: 2,
            scorer_hidden: 4,
            batch_size: 2,
            dev_batch_size: 4,
            checks: 10,
            warmup_steps: 0,
            h: 1e-4,
            tolerance: 1e-3,
            taylor_eps: vec![1e-1, 1e-2, 1e-3],
            taylor_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSpec {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Brute-force problem; the default is two training examples with opposite
/// labels and a dev set equal to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub train: Vec<ExampleSpec>,
    pub dev: Vec<ExampleSpec>,
    pub classes: usize,
    pub l2: f64,
    pub grid_resolution: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            train: vec![
                ExampleSpec {
                    features: vec![1.0, 0.2],
                    label: 1,
                },
                ExampleSpec {
                    features: vec![1.0, -0.2],
                    label: 0,
                },
            ],
            dev: vec![ExampleSpec {
                features: vec![1.0, 0.2],
                label: 1,
            }],
            classes: 2,
            l2: 0.1,
            grid_resolution: 101,
        }
    }
}

/// A parsed config and the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

/// Reads, parses and validates `path`. `seed` overrides the file's seed.
pub fn load(path: &Path, seed: Option<u64>) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config =
        parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir })
}

/// Parses TOML, reporting the dotted key path of the first bad value.
pub fn parse(text: &str) -> Result<RunConfig, String> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            e.into_inner().message().to_string()
        } else {
            format!("{path}: {}", e.into_inner().message())
        }
    })
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if let Some(d) = &self.data {
            d.validate()?;
        }
        for (key, opt) in [
            ("optimizer", &self.optimizer),
            ("scorer.optimizer", &self.scorer.optimizer),
        ] {
            if let Some(o) = opt {
                o.validate().map_err(|e| bad(format!("{key}: {e}")))?;
            }
        }
        self.dds.validate().map_err(|e| bad(e.to_string()))?;
        self.group_dds.validate().map_err(|e| bad(e.to_string()))?;
        let g = &self.gradcheck;
        if g.dim == 0
            || g.classes < 2
            || g.batch_size == 0
            || g.dev_batch_size == 0
            || g.checks == 0
        {
            return Err(bad(
                "gradcheck: dim, batch sizes and checks must be >= 1 and classes >= 2",
            ));
        }
        if !(g.h > 0.0 && g.tolerance > 0.0 && g.taylor_tolerance > 0.0) {
            return Err(bad("gradcheck: h and tolerances must be > 0"));
        }
        Ok(())
    }
}

impl DataConfig {
    fn validate(&self) -> Result<(), CliError> {
        let sources = [
            self.blobs.is_some(),
            self.group_shift.is_some(),
            self.csv.is_some(),
        ];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(bad(
                "data: exactly one of data.blobs, data.group_shift, data.csv is required",
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(bad(format!(
                "data.label_noise: must be in [0, 1), got {}",
                self.label_noise
            )));
        }
        if self.label_noise > 0.0 && self.blobs.is_none() {
            return Err(bad("data.label_noise: only supported with data.blobs"));
        }
        if self.dev_fraction.is_some() && self.dev_per_class.is_some() {
            return Err(bad(
                "data: dev_fraction and dev_per_class are mutually exclusive",
            ));
        }
        if (self.dev_fraction.is_some() || self.dev_per_class.is_some()) && self.blobs.is_none() {
            return Err(bad(
                "data: dev_fraction and dev_per_class apply to data.blobs only",
            ));
        }
        if let Some(f) = self.dev_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(bad(format!(
                    "data.dev_fraction: must be in (0, 1), got {f}"
                )));
            }
        }
        if self.dev_per_class == Some(0) {
            return Err(bad("data.dev_per_class: must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse("schema_version = 1\n").unwrap();
        assert_eq!(c.engine, None);
        assert_eq!(c.dds, DdsConfig::default());
        assert_eq!(c.gradcheck, GradcheckConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_and_missing_keys_name_their_path() {
        let e = parse("schema_version = 1\n[dds]\nbatch = 3\n").unwrap_err();
        assert!(e.starts_with("dds"), "{e}");
        let e = parse("schema_version = 1\n[optimizer]\nlr = 0.1\n").unwrap_err();
        assert!(e.starts_with("optimizer") && e.contains("kind"), "{e}");
        let e = parse("engine = \"dds\"\n").unwrap_err();
        assert!(e.contains("schema_version"), "{e}");
    }

    #[test]
    fn data_needs_exactly_one_source() {
        let c = parse("schema_version = 1\n[data]\nlabel_noise = 0.1\n").unwrap();
        assert!(c.validate().is_err());
        let c = parse(
            "schema_version = 1\n[data.blobs]\ndim = 2\nclasses = 2\nper_class = 5\nspread = 1.0\n",
        )
        .unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        assert!(parse("schema_version = 2\n").unwrap().validate().is_err());
    }
}
