use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dds_core::data::{gen_blobs, holdout_split, inject_label_noise, load_csv, BlobSpec};
use dds_core::models::{load_params, MlpClassifier};
use dds_core::numeric::{Rng, Stream};
use serde_json::Value;

fn dds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    dds(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const BLOBS: &str = r#"
schema_version = 1
seed = 4

[data]
label_noise = 0.2

[data.blobs]
dim = 2
classes = 2
per_class = 40
spread = 1.0
separation = 3.0

[model]
hidden = 6

[optimizer]
kind = "adam"
lr = 0.01

[dds]
batch_size = 8
steps = 60
"#;

#[test]
fn missing_required_key_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "schema_version = 1\nengine = \"dds\"\n[optimizer]\nlr = 0.1\n",
    );
    let out = run("train", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("optimizer") && err.contains("kind"), "{err}");
}

#[test]
fn unknown_key_and_bad_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!(
            "{}\n[dds.taylor]\nepsilon = 1.0\n",
            BLOBS.replace("seed = 4", "seed = 4\nengine = \"dds\"")
        ),
    );
    let out = run("train", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("dds.taylor"));

    let cfg = write_config(
        dir.path(),
        "d.toml",
        &BLOBS
            .replace("seed = 4", "seed = 4\nengine = \"dds\"")
            .replace(
                "steps = 60",
                "steps = 60\nreward = \"cosine\"\ntaylor = { enabled = true }",
            ),
    );
    assert_eq!(
        run("train", &cfg, &dir.path().join("o"), &[]).status.code(),
        Some(2)
    );

    assert_eq!(
        run(
            "train",
            &dir.path().join("absent.toml"),
            &dir.path().join("o"),
            &[]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn numerical_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let rows = "f0,f1,label,group,corrupted\n1e10,1e10,0,0,0\n1e10,1e10,1,0,0\n";
    std::fs::write(dir.path().join("train.csv"), rows).unwrap();
    std::fs::write(dir.path().join("dev.csv"), rows).unwrap();
    let body = "schema_version = 1\nengine = \"baseline\"\n[data.csv]\ntrain = \"train.csv\"\ndev = \"dev.csv\"\n[model]\nhidden = 0\n[optimizer]\nkind = \"sgd\"\nlr = 1e300\n[dds]\nsteps = 3\nbatch_size = 2\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out = run("train", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn zero_steps_writes_empty_metrics_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &BLOBS
            .replace("seed = 4", "seed = 4\nengine = \"dds\"")
            .replace("steps = 60", "steps = 0"),
    );
    let out_dir = dir.path().join("o");
    let out = run("train", &cfg, &out_dir, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap(),
        ""
    );
    let theta = load_params(&out_dir.join("params.bin")).unwrap();
    assert_eq!(
        theta,
        MlpClassifier::new(2, 6, 2).init(&mut Rng::stream(4, Stream::ModelInit))
    );
    assert_eq!(json(&out_dir.join("summary.json"))["steps"], 0);
}

#[test]
fn baseline_matches_dds_with_frozen_scorer() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(
        dir.path(),
        "b.toml",
        &BLOBS.replace("seed = 4", "seed = 4\nengine = \"baseline\""),
    );
    let frozen = write_config(
        dir.path(),
        "f.toml",
        &format!(
            "{}\n[scorer]\nfrozen = true\n",
            BLOBS.replace("seed = 4", "seed = 4\nengine = \"dds\"")
        ),
    );
    let (bo, fo) = (dir.path().join("b"), dir.path().join("f"));
    assert!(run("train", &base, &bo, &[]).status.success());
    assert!(run("train", &frozen, &fo, &[]).status.success());
    let (sb, sf) = (
        json(&bo.join("summary.json")),
        json(&fo.join("summary.json")),
    );
    for key in ["final_dev_acc", "final_dev_loss", "steps", "seed"] {
        assert_eq!(sb[key], sf[key], "{key}");
    }
    assert_eq!(
        std::fs::read(bo.join("params.bin")).unwrap(),
        std::fs::read(fo.join("params.bin")).unwrap()
    );
    assert!((sf["corrupted_weight_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(sb["engine"], "baseline");
}

#[test]
fn identical_configs_give_identical_metrics_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &BLOBS.replace("seed = 4", "seed = 4\nengine = \"dds\""),
    );
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    assert!(run("train", &cfg, &a, &[]).status.success());
    assert!(run("train", &cfg, &b, &[]).status.success());
    assert!(run("train", &cfg, &c, &["--seed", "5"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let (sa, sc) = (json(&a.join("summary.json")), json(&c.join("summary.json")));
    assert_eq!(sc["seed"], 5);
    assert_ne!(sa["provenance"], sc["provenance"]);
    assert!(sa["provenance"].as_str().unwrap().starts_with("dds-core "));
    assert!(sa["wall_time_s"].as_f64().unwrap() >= 0.0);
    let lines: Vec<Value> = String::from_utf8(read(&a))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 60);
    assert!(lines
        .windows(2)
        .all(|w| w[0]["step"].as_u64() < w[1]["step"].as_u64()));
}

#[test]
fn group_engine_reports_group_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
schema_version = 1
engine = "group_dds"

[data.group_shift]
groups = 3
dim = 2
classes = 2
instances_per_class = 20
dev_per_class = 10
spread = 1.0
separation = 4.0
shift_scale = 3.0

[model]
hidden = 4

[optimizer]
kind = "adam"
lr = 0.01

[group_dds]
steps = 50
k = 20
b = 8
"#;
    let cfg = write_config(dir.path(), "g.toml", body);
    let out_dir = dir.path().join("o");
    let out = run("train", &cfg, &out_dir, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = json(&out_dir.join("summary.json"));
    assert_eq!(s["steps"], 50);
    let p: Vec<f64> = s["group_probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(p.len(), 3);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(
        std::fs::read_to_string(out_dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    assert!(out_dir.join("scorer.bin").exists());
}

#[test]
fn gradcheck_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "schema_version = 1\n");
    let out_dir = dir.path().join("o");
    let out = run("gradcheck", &cfg, &out_dir, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json(&out_dir.join("report.json"));
    assert_eq!(r["pass"], true);
    for c in r["hypergradient"].as_array().unwrap() {
        assert!(c["max_rel_error"].as_f64().unwrap() < 1e-3);
    }
}

#[test]
fn gradcheck_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "schema_version = 1\n[gradcheck]\ntolerance = 1e-300\n",
    );
    assert_eq!(
        run("gradcheck", &cfg, &dir.path().join("o"), &[])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn oracle_with_one_example_puts_all_weight_on_it() {
    let dir = tempfile::tempdir().unwrap();
    let body = "schema_version = 1\n[oracle]\ntrain = [{ features = [1.0, 0.5], label = 1 }]\ndev = [{ features = [1.0, 0.0], label = 0 }]\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out_dir = dir.path().join("o");
    assert!(run("oracle", &cfg, &out_dir, &[]).status.success());
    assert_eq!(
        json(&out_dir.join("report.json"))["best_weights"],
        serde_json::json!([1.0])
    );

    let cfg = write_config(
        dir.path(),
        "d.toml",
        "schema_version = 1\n[oracle]\ngrid_resolution = 3\n",
    );
    assert_eq!(
        run("oracle", &cfg, &dir.path().join("p"), &[])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn gen_data_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BLOBS);
    let out_dir = dir.path().join("o");
    let out = run("gen-data", &cfg, &out_dir, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let spec = BlobSpec {
        separation: 3.0,
        ..BlobSpec::new(2, 2, 40, 1.0)
    };
    let all = gen_blobs(&spec, Rng::derive_seed(4, Stream::Data)).unwrap();
    let (train, dev) = holdout_split(&all, 0.1, Rng::derive_seed(4, Stream::Split)).unwrap();
    let train = inject_label_noise(&train, 0.2, Rng::derive_seed(4, Stream::LabelNoise)).unwrap();

    let t = load_csv(&out_dir.join("train.csv"), None, None)
        .unwrap()
        .dataset;
    assert_eq!(t.examples, train.examples);
    assert_eq!(t.corrupted, train.corrupted);
    assert_eq!(
        load_csv(&out_dir.join("dev.csv"), None, None)
            .unwrap()
            .dataset
            .examples,
        dev.examples
    );
    let side = json(&out_dir.join("data.json"));
    assert_eq!(side["train_examples"], train.len());
    assert_eq!(side["corrupted_examples"], 14);

    let reuse = "schema_version = 1\nengine = \"baseline\"\n[data.csv]\ntrain = \"o/train.csv\"\ndev = \"o/dev.csv\"\n[dds]\nsteps = 5\nbatch_size = 4\n";
    let cfg = write_config(dir.path(), "r.toml", reuse);
    assert!(run("train", &cfg, &dir.path().join("r"), &[])
        .status
        .success());
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn shipped_configs_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["noisy-labels", "imbalance", "groups"] {
        let cfg = repo_root().join("configs").join(format!("{name}.toml"));
        let out = run("gen-data", &cfg, &dir.path().join(name), &[]);
        assert!(
            out.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = run(
        "oracle",
        &repo_root().join("configs/oracle.toml"),
        &dir.path().join("oracle"),
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn reference_config_in_guide_parses() {
    let guide = std::fs::read_to_string(repo_root().join("book/src/cli.md")).unwrap();
    let block = guide
        .split("```toml\n")
        .nth(1)
        .unwrap()
        .split("```")
        .next()
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ref.toml", block);
    let out = run("gen-data", &cfg, &dir.path().join("o"), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
