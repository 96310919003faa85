//! Labeled datasets: synthetic generators, CSV I/O and holdout splitting.
//!
//! Class means of the blob generators sit on the vertices of a scaled binary
//! hypercube: class `k` has mean `separation * bit_j(k)` on axis `j`, so class
//! 0 is at the origin and classes 1 and 2 sit `separation` away along axes 0
//! and 1. This needs `classes <= 2^dim`.
//!
//! CSV files carry a header `f0,...,f{d-1},label,group`, optionally followed
//! by `instance` (target-instance id for grouped data) and `corrupted`
//! (0/1 label-noise flag). Floats use Rust's shortest round-trip formatting.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub group: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: usize, group: usize) -> Self {
        LabeledExample {
            features,
            label,
            group,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub dim: usize,
    pub classes: usize,
    pub groups: usize,
    pub provenance: String,
    /// Ground-truth label-noise flags. Evaluation only; never fed to a scorer.
    pub corrupted: Vec<bool>,
}

impl Dataset {
    pub fn new(
        examples: Vec<LabeledExample>,
        dim: usize,
        classes: usize,
        groups: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let corrupted = vec![false; examples.len()];
        let ds = Dataset {
            examples,
            dim,
            classes,
            groups,
            provenance: provenance.into(),
            corrupted,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.corrupted.len() != self.examples.len() {
            return Err(Error::config(
                "corruption mask length differs from example count",
            ));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.features.len() != self.dim {
                return Err(Error::config(format!(
                    "example {i} has {} features, expected {}",
                    ex.features.len(),
                    self.dim
                )));
            }
            if ex.label >= self.classes {
                return Err(Error::config(format!(
                    "example {i} has label {} outside [0, {})",
                    ex.label, self.classes
                )));
            }
            if ex.group >= self.groups {
                return Err(Error::config(format!(
                    "example {i} has group {} outside [0, {})",
                    ex.group, self.groups
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset features"));
            }
        }
        Ok(())
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    fn subset(&self, indices: &[usize], provenance: String) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            corrupted: indices.iter().map(|&i| self.corrupted[i]).collect(),
            provenance,
            dim: self.dim,
            classes: self.classes,
            groups: self.groups,
        }
    }
}

/// Gaussian blob generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    /// Examples per class; overridden by `class_counts` when present.
    pub per_class: usize,
    pub spread: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub class_counts: Option<Vec<usize>>,
}

fn default_separation() -> f64 {
    10.0
}

impl BlobSpec {
    pub fn new(dim: usize, classes: usize, per_class: usize, spread: f64) -> Self {
        BlobSpec {
            dim,
            classes,
            per_class,
            spread,
            separation: default_separation(),
            class_counts: None,
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.class_counts
            .clone()
            .unwrap_or_else(|| vec![self.per_class; self.classes])
    }
}

/// Mean of class `k` on the scaled hypercube lattice.
pub fn class_mean(dim: usize, k: usize, separation: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            if j < usize::BITS as usize && (k >> j) & 1 == 1 {
                separation
            } else {
                0.0
            }
        })
        .collect()
}

fn check_lattice(dim: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::config("classes must be >= 2"));
    }
    if dim == 0 {
        return Err(Error::config("dim must be >= 1"));
    }
    if dim < usize::BITS as usize && classes > 1usize << dim {
        return Err(Error::config(format!(
            "{classes} classes do not fit on the {dim}-dimensional lattice"
        )));
    }
    Ok(())
}

/// Isotropic Gaussian blobs, one per class, in class-major order. Draws
/// `dim` standard normals per example in generation order.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    check_lattice(spec.dim, spec.classes)?;
    let counts = spec.counts();
    if counts.len() != spec.classes {
        return Err(Error::config("class_counts length must equal classes"));
    }
    if counts.contains(&0) {
        return Err(Error::config("every class needs at least one example"));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::config("spread must be finite and >= 0"));
    }
    let mut rng = Rng::new(seed);
    let mut examples = Vec::with_capacity(counts.iter().sum());
    for (k, &count) in counts.iter().enumerate() {
        let mean = class_mean(spec.dim, k, spec.separation);
        for _ in 0..count {
            let features = mean
                .iter()
                .map(|m| m + spec.spread * rng.normal())
                .collect();
            examples.push(LabeledExample::new(features, k, 0));
        }
    }
    Dataset::new(
        examples,
        spec.dim,
        spec.classes,
        1,
        format!("blobs(seed={seed})"),
    )
}

/// Resamples exactly `round(rate * N)` labels uniformly among the other
/// classes and flags them in the corruption mask.
pub fn inject_label_noise(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!(
            "noise rate must be in [0, 1], got {rate}"
        )));
    }
    if ds.classes < 2 {
        return Err(Error::config("label noise needs at least two classes"));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    let count = (rate * ds.len() as f64).round() as usize;
    let mut out = ds.clone();
    for &i in &order[..count] {
        let old = out.examples[i].label;
        let draw = rng.below(ds.classes - 1);
        out.examples[i].label = if draw >= old { draw + 1 } else { draw };
        out.corrupted[i] = true;
    }
    out.provenance = format!("{} + label_noise(rate={rate}, seed={seed})", ds.provenance);
    Ok(out)
}

/// Splits off `round(fraction * N)` examples (at least one on each side) as
/// a dev set. Both parts keep the original relative order.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    if ds.len() < 2 {
        return Err(Error::config("holdout split needs at least two examples"));
    }
    let count = ((fraction * ds.len() as f64).round() as usize).clamp(1, ds.len() - 1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut dev: Vec<usize> = order[..count].to_vec();
    let mut train: Vec<usize> = order[count..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    Ok((
        ds.subset(&train, format!("{} | train split", ds.provenance)),
        ds.subset(&dev, format!("{} | dev split", ds.provenance)),
    ))
}

/// One target instance: a label shared by one example from each available group.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance {
    pub label: usize,
    /// Index into the training set per group, `None` where unavailable.
    pub members: Vec<Option<usize>>,
}

impl TargetInstance {
    /// 1.0 where a group has an example for this instance.
    pub fn availability(&self) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| if m.is_some() { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Multi-source training data organised by target instance, plus a dev set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub train: Dataset,
    pub instances: Vec<TargetInstance>,
    pub dev: Dataset,
}

impl GroupedDataset {
    /// Rebuilds instances from per-example ids (`instance_ids`), or, when
    /// absent, pairs the k-th example of each label across groups.
    pub fn from_flat(train: Dataset, dev: Dataset, instance_ids: Option<&[usize]>) -> Result<Self> {
        let n = train.groups;
        let mut keyed: BTreeMap<(usize, usize), TargetInstance> = BTreeMap::new();
        let mut rank: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (idx, ex) in train.examples.iter().enumerate() {
            let key = match instance_ids {
                Some(ids) => (ids[idx], 0),
                None => {
                    let r = rank.entry((ex.label, ex.group)).or_insert(0);
                    *r += 1;
                    (ex.label, *r - 1)
                }
            };
            let inst = keyed.entry(key).or_insert_with(|| TargetInstance {
                label: ex.label,
                members: vec![None; n],
            });
            if inst.label != ex.label {
                return Err(Error::config(format!("instance {key:?} mixes labels")));
            }
            if inst.members[ex.group].replace(idx).is_some() {
                return Err(Error::config(format!(
                    "instance {key:?} has two examples from group {}",
                    ex.group
                )));
            }
        }
        if dev.dim != train.dim || dev.classes != train.classes {
            return Err(Error::config("dev set dimensions differ from training set"));
        }
        Ok(GroupedDataset {
            train,
            instances: keyed.into_values().collect(),
            dev,
        })
    }

    /// Instance id of every training example, in example order.
    pub fn instance_ids(&self) -> Vec<usize> {
        let mut ids = vec![0; self.train.len()];
        for (j, inst) in self.instances.iter().enumerate() {
            for &m in inst.members.iter().flatten() {
                ids[m] = j;
            }
        }
        ids
    }
}

/// Multi-group generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupShiftSpec {
    pub groups: usize,
    pub dim: usize,
    pub classes: usize,
    /// Target instances per class.
    pub instances_per_class: usize,
    pub dev_per_class: usize,
    pub spread: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub shift_scale: f64,
    #[serde(default)]
    pub dev_group: usize,
    /// Probability that a group is missing from an instance.
    #[serde(default)]
    pub availability_dropout: f64,
}

/// Translation applied to every class mean of `group`. The dev group is not
/// shifted; the other groups, in index order, get unit directions spread
/// evenly around the circle in the plane of axes 0 and 1 (alternating signs
/// on axis 0 when `dim == 1`), scaled by `shift_scale`.
pub fn group_offset(spec: &GroupShiftSpec, group: usize) -> Vec<f64> {
    let mut offset = vec![0.0; spec.dim];
    if group == spec.dev_group {
        return offset;
    }
    let k = if group < spec.dev_group {
        group
    } else {
        group - 1
    };
    let others = spec.groups - 1;
    if spec.dim == 1 {
        offset[0] = if k % 2 == 0 {
            spec.shift_scale
        } else {
            -spec.shift_scale
        };
    } else {
        let phi = 2.0 * PI * k as f64 / others as f64;
        offset[0] = spec.shift_scale * phi.cos();
        offset[1] = spec.shift_scale * phi.sin();
    }
    offset
}

/// Parallel multi-group data: every target instance draws one example per
/// available group from that group's shifted class distribution; the dev set
/// is drawn from the unshifted dev group.
pub fn gen_group_shift(spec: &GroupShiftSpec, seed: u64) -> Result<GroupedDataset> {
    check_lattice(spec.dim, spec.classes)?;
    if spec.groups == 0 || spec.dev_group >= spec.groups {
        return Err(Error::config(format!(
            "dev_group {} must be < groups {}",
            spec.dev_group, spec.groups
        )));
    }
    if spec.instances_per_class == 0 || spec.dev_per_class == 0 {
        return Err(Error::config(
            "instances_per_class and dev_per_class must be >= 1",
        ));
    }
    if !(0.0..1.0).contains(&spec.availability_dropout) {
        return Err(Error::config("availability_dropout must be in [0, 1)"));
    }
    let n = spec.groups;
    let offsets: Vec<Vec<f64>> = (0..n).map(|g| group_offset(spec, g)).collect();
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| class_mean(spec.dim, k, spec.separation))
        .collect();
    let mut rng = Rng::new(seed);
    let draw = |rng: &mut Rng, label: usize, group: usize| -> Vec<f64> {
        means[label]
            .iter()
            .zip(&offsets[group])
            .map(|(m, o)| m + o + spec.spread * rng.normal())
            .collect()
    };

    let mut examples = Vec::new();
    let mut instances = Vec::new();
    for _ in 0..spec.instances_per_class {
        for label in 0..spec.classes {
            let mut available: Vec<bool> = (0..n)
                .map(|_| rng.uniform() >= spec.availability_dropout)
                .collect();
            if !available.iter().any(|&a| a) {
                available[rng.below(n)] = true;
            }
            let mut members = vec![None; n];
            for g in 0..n {
                if available[g] {
                    members[g] = Some(examples.len());
                    examples.push(LabeledExample::new(draw(&mut rng, label, g), label, g));
                }
            }
            instances.push(TargetInstance { label, members });
        }
    }
    let mut dev_examples = Vec::new();
    for _ in 0..spec.dev_per_class {
        for label in 0..spec.classes {
            dev_examples.push(LabeledExample::new(
                draw(&mut rng, label, spec.dev_group),
                label,
                spec.dev_group,
            ));
        }
    }
    let tag = format!("group_shift(seed={seed}, shift_scale={})", spec.shift_scale);
    Ok(GroupedDataset {
        train: Dataset::new(examples, spec.dim, spec.classes, n, tag.clone())?,
        instances,
        dev: Dataset::new(
            dev_examples,
            spec.dim,
            spec.classes,
            n,
            format!("{tag} | dev"),
        )?,
    })
}

/// Writes a dataset as CSV. `instance_ids` adds an `instance` column.
pub fn write_csv(path: &Path, ds: &Dataset, instance_ids: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..ds.dim).map(|j| format!("f{j}")).collect();
    header.extend(["label".to_string(), "group".to_string()]);
    if instance_ids.is_some() {
        header.push("instance".into());
    }
    header.push("corrupted".into());
    w.write_record(&header).map_err(csv_io)?;
    for (i, ex) in ds.examples.iter().enumerate() {
        let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(ex.label.to_string());
        row.push(ex.group.to_string());
        if let Some(ids) = instance_ids {
            row.push(ids[i].to_string());
        }
        row.push(u8::from(ds.corrupted[i]).to_string());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// A dataset loaded from CSV, with the optional instance column if present.
#[derive(Debug, Clone)]
pub struct CsvData {
    pub dataset: Dataset,
    pub instance_ids: Option<Vec<usize>>,
}

/// Reads the CSV format described in the module docs. `classes` and
/// `groups` are inferred as one past the largest value seen unless given.
pub fn load_csv(path: &Path, classes: Option<usize>, groups: Option<usize>) -> Result<CsvData> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let dim = header.iter().take_while(|h| h.starts_with('f')).count();
    for (j, h) in header[..dim].iter().enumerate() {
        if *h != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found {h:?}")));
        }
    }
    let rest: Vec<&str> = header[dim..].iter().map(String::as_str).collect();
    let (has_instance, has_corrupted) = match rest.as_slice() {
        ["label", "group"] => (false, false),
        ["label", "group", "instance"] => (true, false),
        ["label", "group", "corrupted"] => (false, true),
        ["label", "group", "instance", "corrupted"] => (true, true),
        _ => return Err(parse_err(
            1,
            format!(
                "header must be f0..f{{d-1}},label,group[,instance][,corrupted]; got {header:?}"
            ),
        )),
    };
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut examples = Vec::new();
    let mut corrupted = Vec::new();
    let mut ids = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let field = |i: usize| record[i].trim();
        let features = (0..dim)
            .map(|j| {
                field(j)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        parse_err(
                            line,
                            format!("column f{j}: {:?} is not a finite number", field(j)),
                        )
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let int = |i: usize, name: &str| {
            field(i).parse::<usize>().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "column {name}: {:?} is not a non-negative integer",
                        field(i)
                    ),
                )
            })
        };
        let label = int(dim, "label")?;
        let group = int(dim + 1, "group")?;
        let mut next = dim + 2;
        if has_instance {
            ids.push(int(next, "instance")?);
            next += 1;
        }
        if has_corrupted {
            match field(next) {
                "0" => corrupted.push(false),
                "1" => corrupted.push(true),
                other => {
                    return Err(parse_err(
                        line,
                        format!("column corrupted: {other:?} is not 0 or 1"),
                    ))
                }
            }
        } else {
            corrupted.push(false);
        }
        examples.push(LabeledExample::new(features, label, group));
    }
    if examples.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let classes = classes
        .unwrap_or_else(|| examples.iter().map(|e| e.label).max().unwrap_or(0) + 1)
        .max(2);
    let groups = groups.unwrap_or_else(|| examples.iter().map(|e| e.group).max().unwrap_or(0) + 1);
    let dataset = Dataset {
        examples,
        dim,
        classes,
        groups,
        provenance: format!("csv({})", path.display()),
        corrupted,
    };
    dataset.validate()?;
    Ok(CsvData {
        dataset,
        instance_ids: has_instance.then_some(ids),
    })
}
