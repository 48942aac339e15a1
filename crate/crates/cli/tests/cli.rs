use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const GAUSSIAN: &str = r#"version = 1
name = "tiny"
seed = 7

[simulator]
kind = "gaussian"
n = 2

[network]
icnn_width = 8
icnn_layers = 2
deepset_width = 8
q1 = 2

[training]
epochs = 3
iters_per_epoch = 3
batch = 16
restarts = 2

[evaluation]
metrics = ["mmd", "dtm", "coverage", "w2", "hull_area"]
tau = [0.5, 0.8, 0.9]
x = 0.5
samples = 200
permutations = 20
dtm_j = 6
dtm_i = 15
coverage_set = 100
coverage_test = 300
"#;

const BROCK_HOMMES: &str = r#"version = 1
name = "bh"
seed = 3

[simulator]
kind = "brock_hommes"
t = 20
burn_in = 10

[network]
icnn_width = 8
icnn_layers = 2
deepset_width = 8
q1 = 2
q2 = 2

[training]
epochs = 1
iters_per_epoch = 2
batch = 8
restarts = 1

[evaluation]
theta_star = [0.9, 0.2, 0.9, -0.2]
"#;

fn qbayes(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbayes"))
        .args(args)
        .current_dir(cwd)
        .env_remove("QBAYES_OUT")
        .output()
        .expect("spawn qbayes")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = qbayes(args, cwd);
    assert!(
        out.status.success(),
        "qbayes {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup(name: &str, text: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    (dir, path)
}

fn train(dir: &Path, config: &str, out: &str) -> PathBuf {
    ok(&["train", "--config", config, "--out", out], dir);
    dir.join(out)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn metrics(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_writes_model_loss_and_manifest() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    let out = train(tmp.path(), "g.toml", "run");
    assert!(out.join("model.json").is_file());
    let loss = csv_rows(&out.join("loss.csv"));
    assert_eq!(loss.len(), 3);
    assert!(loss.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    assert_eq!(csv_rows(&out.join("restarts.csv")).len(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let digest = hex::encode(Sha256::digest(GAUSSIAN.as_bytes()));
    assert_eq!(manifest["config_sha256"], digest.as_str());
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "train");
}

#[test]
fn output_dir_falls_back_to_env_then_name() {
    let (tmp, _) = setup("g.toml", GAUSSIAN.replace("epochs = 3", "epochs = 1").as_str());
    let out = Command::new(env!("CARGO_BIN_EXE_qbayes"))
        .args(["train", "--config", "g.toml"])
        .current_dir(tmp.path())
        .env("QBAYES_OUT", tmp.path().join("envroot"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("envroot/tiny/model.json").is_file());
}

#[test]
fn missing_seed_is_reported_by_name() {
    let (tmp, _) = setup("g.toml", &GAUSSIAN.replace("seed = 7\n", ""));
    let out = qbayes(&["train", "--config", "g.toml", "--out", "run"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    assert!(!tmp.path().join("run/model.json").exists());
}

#[test]
fn unknown_field_is_rejected_with_line() {
    let (tmp, _) = setup("g.toml", &GAUSSIAN.replace("q1 = 2", "q1 = 2\nwidht = 4"));
    let out = qbayes(&["train", "--config", "g.toml", "--out", "run"], tmp.path());
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("widht") && err.contains("line 14"), "{err}");
}

#[test]
fn reruns_are_byte_identical() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    let a = train(tmp.path(), "g.toml", "a");
    let b = train(tmp.path(), "g.toml", "b");
    for f in ["loss.csv", "restarts.csv", "model.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let seeded = ["--model", "a/model.json", "--x", "0.5", "--n", "2", "--count", "50", "--seed", "5"];
    ok(&[&["sample"][..], &seeded, &["--out", "s1"]].concat(), tmp.path());
    ok(&[&["sample"][..], &seeded, &["--out", "s2"]].concat(), tmp.path());
    assert_eq!(
        fs::read(tmp.path().join("s1/samples.csv")).unwrap(),
        fs::read(tmp.path().join("s2/samples.csv")).unwrap()
    );
}

#[test]
fn seed_override_changes_training() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    let a = train(tmp.path(), "g.toml", "a");
    ok(&["train", "--config", "g.toml", "--out", "b", "--seed", "8"], tmp.path());
    assert_ne!(
        fs::read(a.join("loss.csv")).unwrap(),
        fs::read(tmp.path().join("b/loss.csv")).unwrap()
    );
}

#[test]
fn sample_without_tau_writes_only_samples() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    train(tmp.path(), "g.toml", "run");
    ok(
        &["sample", "--model", "run/model.json", "--x", "-0.25", "--n", "2", "--count", "40", "--out", "s"],
        tmp.path(),
    );
    let s = tmp.path().join("s");
    let rows = csv_rows(&s.join("samples.csv"));
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.len() == 2));
    assert!(!s.join("hulls.json").exists());
    assert!(!s.join("credible.csv").exists());
}

#[test]
fn sample_with_tau_writes_credible_set() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    train(tmp.path(), "g.toml", "run");
    ok(
        &["sample", "--model", "run/model.json", "--config", "g.toml", "--tau", "0.8", "--count", "60", "--out", "s"],
        tmp.path(),
    );
    let s = tmp.path().join("s");
    assert_eq!(csv_rows(&s.join("credible.csv")).len(), 60);
    let hulls: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(s.join("hulls.json")).unwrap()).unwrap();
    assert_eq!(hulls.len(), 1);
    assert_eq!(hulls[0]["level"], 0.8);
}

#[test]
fn sample_rejects_wrong_observation_count() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    train(tmp.path(), "g.toml", "run");
    fs::write(tmp.path().join("x.csv"), "x\n0.1\n0.2\n0.3\n").unwrap();
    let out = qbayes(&["sample", "--model", "run/model.json", "--x-file", "x.csv", "--out", "s"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("rows"), "{}", stderr(&out));

    let out = qbayes(&["sample", "--model", "run/model.json", "--x", "0.5", "--n", "2", "--tau", "1.5"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn brock_hommes_credible_set_has_six_pair_hulls() {
    let (tmp, _) = setup("bh.toml", BROCK_HOMMES);
    train(tmp.path(), "bh.toml", "run");
    ok(
        &["sample", "--model", "run/model.json", "--config", "bh.toml", "--tau", "0.5", "--count", "80", "--out", "s"],
        tmp.path(),
    );
    let hulls: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s/hulls.json")).unwrap()).unwrap();
    assert_eq!(hulls.len(), 6);
    assert!(hulls.iter().all(|h| h["level"] == 0.5));
    let rows = csv_rows(&tmp.path().join("s/samples.csv"));
    assert!(rows.iter().all(|r| r.len() == 4));
    assert_eq!(csv_rows(&tmp.path().join("s/observed.csv")).len(), 20);
}

#[test]
fn eval_writes_every_requested_metric() {
    let (tmp, _) = setup("g.toml", GAUSSIAN);
    train(tmp.path(), "g.toml", "run");
    ok(&["eval", "--model", "run/model.json", "--config", "g.toml", "--out", "e"], tmp.path());
    let recs = metrics(&tmp.path().join("e/metrics.jsonl"));
    let of = |m: &str| recs.iter().filter(|r| r["metric"] == m).collect::<Vec<_>>();

    let mmd = of("mmd");
    assert_eq!(mmd.len(), 1);
    assert_eq!(mmd[0]["meta"]["kernel"], "rbf");
    assert!(mmd[0]["meta"]["bandwidth"].as_f64().unwrap() > 0.0);

    let dtm = of("dtm");
    assert_eq!((dtm[0]["meta"]["J"].as_u64(), dtm[0]["meta"]["I"].as_u64()), (Some(6), Some(15)));

    let cov: Vec<f64> = of("coverage").iter().map(|r| r["value"].as_f64().unwrap()).collect();
    assert_eq!(cov.len(), 3);
    assert!(cov.windows(2).all(|w| w[0] <= w[1]), "{cov:?}");
    assert!(cov.iter().all(|c| (0.0..=1.0).contains(c)));

    assert_eq!(of("w2").len(), 2);
    assert_eq!(of("hull_area").len(), 3);
    assert!(recs.iter().all(|r| r["seed"] == 7));
}

#[test]
fn eval_needs_an_oracle_for_mmd() {
    let text = BROCK_HOMMES.replace("[evaluation]", "[evaluation]\nmetrics = [\"mmd\"]");
    let (tmp, _) = setup("bh.toml", &text);
    train(tmp.path(), "bh.toml", "run");
    let out = qbayes(&["eval", "--model", "run/model.json", "--config", "bh.toml", "--out", "e"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("exact posterior"), "{}", stderr(&out));
}

#[test]
fn reproduce_rejects_unknown_figure() {
    let tmp = TempDir::new().unwrap();
    let out = qbayes(&["reproduce", "fig9"], tmp.path());
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("gaussian-shrinkage") && err.contains("brock-hommes-contours"), "{err}");
}

#[test]
fn reproduce_shrinkage_is_deterministic() {
    let text = GAUSSIAN
        .replace("restarts = 2", "restarts = 1")
        .replace("tau = [0.5, 0.8, 0.9]", "tau = [0.9]")
        .replace("samples = 200", "samples = 100");
    let (tmp, _) = setup("g.toml", &text);
    ok(&["reproduce", "gaussian-shrinkage", "--config", "g.toml", "--out", "a"], tmp.path());
    ok(&["reproduce", "gaussian-shrinkage", "--config", "g.toml", "--out", "b"], tmp.path());
    let areas = csv_rows(&tmp.path().join("a/areas.csv"));
    assert_eq!(areas.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2", "8", "32"]);
    for f in ["areas.csv", "hulls.json", "n8/samples.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
