use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedproj::report::read_csv;
use tempfile::TempDir;

const TINY: &str = r#"
seeds = [0]

[dataset]
kind = "synth"
classes = 3
dim = 2
train_per_class = 30
test_per_class = 30
spread = 0.5
seed = 3
h0 = 1.0

[partition]
clients = 2
beta = 1.0
min_shard = 5

[model]
hidden = [8]

[federation]
rounds = 2
local_epochs = 2
batch_size = 16

[personalization]
lambdas = [0, 1, inf]

[eval]
mc_samples = 3
"#;

fn fedproj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedproj")).args(args).output().unwrap()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_in(dir: &TempDir, cfg: &Path, cmd: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out = dir.path().join(format!("out-{cmd}"));
    let mut args = vec![cmd, cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (fedproj(&args), out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    read_csv(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_dataset_file_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "idx.toml",
        r#"
[dataset]
kind = "idx"
train_images = "nowhere/train-images-idx3-ubyte"
train_labels = "nowhere/train-labels-idx1-ubyte"
test_images = "nowhere/t10k-images-idx3-ubyte"
test_labels = "nowhere/t10k-labels-idx1-ubyte"
"#,
    );
    let (o, _) = run_in(&dir, &cfg, "run", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("dataset.train_images"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_bad_values_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "typo.toml", &TINY.replace("rounds = 2", "roundz = 2"));
    let (o, _) = run_in(&dir, &cfg, "run", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("roundz"), "{}", stderr(&o));

    let cfg = write_config(&dir, "beta.toml", &TINY.replace("beta = 1.0", "beta = -1.0"));
    let (o, _) = run_in(&dir, &cfg, "run", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("partition.beta"), "{}", stderr(&o));

    assert_eq!(fedproj(&["run"]).status.code(), Some(2));
    assert_eq!(fedproj(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn injected_fault_fails_with_a_counterexample() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("v");
    let o = fedproj(&["validate-geometry", "--instances", "5", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = fedproj(&[
        "validate-geometry",
        "--instances",
        "5",
        "--inject-fault",
        "w2b-uses-eaa-variance",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("FAIL") && text.contains("counterexample:"), "{text}");
    assert!(fs::read_to_string(out.join("validation.txt")).unwrap().contains("counterexample:"));
}

#[test]
fn minimal_run_reports_all_four_settings() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "tiny.toml", TINY);
    let (o, out) = run_in(&dir, &cfg, "run", &["--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let (header, body) = rows(&out.join("metrics.csv"));
    assert_eq!(header, fedproj::report::METRICS_HEADER);
    for tag in ["PM-LD", "PM-GD", "GM-LD", "GM-GD"] {
        assert!(body.iter().any(|r| r[0] == tag), "no {tag} rows");
    }
    assert!(body.iter().all(|r| r[4] == "7"), "seed override not applied");
    // One global row, two GM-LD rows, then 3 λ × 2 clients × 2 settings.
    assert_eq!(body.len(), 1 + 2 + 12);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    for f in ["metrics.csv", "rounds.csv", "report.json"] {
        assert!(files.contains(&f), "{files:?}");
    }
    assert!(files.iter().any(|f| f.ends_with("global.bflg")));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.starts_with("# fedproj "));
    assert!(text.contains(&format!("config_sha256={}", manifest["config_sha256"].as_str().unwrap())));
}

#[test]
fn zero_lambda_reproduces_the_global_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "zero.toml", &TINY.replace("lambdas = [0, 1, inf]", "lambdas = [0]"));
    let (o, out) = run_in(&dir, &cfg, "run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, body) = rows(&out.join("metrics.csv"));
    let pick = |setting: &str, lambda: &str| -> Vec<Vec<String>> {
        body.iter().filter(|r| r[0] == setting && r[2] == lambda).cloned().collect()
    };
    let gm = pick("GM-LD", "");
    let pm = pick("PM-LD", "0");
    assert_eq!(gm.len(), 2);
    assert_eq!(pm.len(), 2);
    for (a, b) in gm.iter().zip(&pm) {
        assert_eq!(a[3], b[3]);
        assert_eq!(a[5..], b[5..], "client {}", a[3]);
    }
}

#[test]
fn compare_needs_five_seeds_and_writes_a_lower_triangle() {
    let dir = TempDir::new().unwrap();
    let few = write_config(&dir, "few.toml", TINY);
    let (o, _) = run_in(&dir, &few, "compare-agg", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = write_config(&dir, "five.toml", &TINY.replace("seeds = [0]", "seeds = [0, 1, 2, 3, 4]"));
    let (o, out) = run_in(&dir, &cfg, "compare-agg", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, body) = rows(&out.join("pvalues.csv"));
    assert_eq!(header, ["method_a", "method_b", "metric", "p", "statistic", "n", "status"]);
    assert_eq!(body.len(), 3 * 3);
    let order = ["EAA", "W2B", "RKLB"];
    for r in &body {
        let (a, b) = (order.iter().position(|m| *m == r[0]), order.iter().position(|m| *m == r[1]));
        assert!(a > b, "{r:?} is not below the diagonal");
        if r[6] != "degenerate" {
            let p: f64 = r[3].parse().unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn partition_manifests_cover_the_training_set() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "tiny.toml", TINY);
    let (o, out) = run_in(&dir, &cfg, "partition", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("shards-seed-0.json")).unwrap()).unwrap();
    let shards = doc["report"].as_array().unwrap();
    assert_eq!(shards.len(), 2);
    let mut all: Vec<u64> = Vec::new();
    for (k, s) in shards.iter().enumerate() {
        assert_eq!(s["client_id"], k);
        let idx: Vec<u64> = s["indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        let hist: u64 = s["class_histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(hist, idx.len() as u64);
        all.extend(idx);
    }
    all.sort_unstable();
    assert_eq!(all, (0..90).collect::<Vec<u64>>());
}

#[test]
fn sweep_and_incremental_write_their_tables() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "inc.toml",
        &format!("{}\n[incremental]\nepochs = 3\nweights = [0, 0.5, 1]\n", TINY.replace("classes = 3", "classes = 4")),
    );
    let (o, out) = run_in(&dir, &cfg, "sweep-lambda", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, body) = rows(&out.join("sweep.csv"));
    assert_eq!(header[2], "lambda");
    assert_eq!(body.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(), ["0", "1", "inf"]);

    let (o, out) = run_in(&dir, &cfg, "incremental", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, body) = rows(&out.join("incremental.csv"));
    assert_eq!(body.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(), ["0", "0.5", "1"]);
}
