use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dsm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsm"))
        .args(args)
        .current_dir(dir)
        .env("DSM_THREADS", "1")
        .output()
        .expect("run dsm")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 16] = [
    "--set", "k=2", "--set", "alpha=1", "--set", "learning_rate=1e-3", "--set", "layers=1", "--set", "width=8",
    "--set", "family=weibull", "--set", "lambda=1e-8", "--set", "max_epochs=5",
];

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_train_eval_embed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(dsm(&["generate", "--n", "400", "--seed", "3", "--out", "syn.csv"], d));
    assert!(out.contains("400 rows"), "{out}");
    let manifest = json(&d.join("syn.csv.manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seeds"]["generator"], 3);

    let mut args = vec!["train", "--data", "syn.csv", "--out", "model.txt"];
    args.extend(SMALL);
    ok(dsm(&args, d));
    assert!(json(&d.join("model.txt.manifest.json"))["config_hash"].is_string());

    let out = ok(dsm(&["eval", "--model", "model.txt", "--data", "syn.csv", "--out", "ev"], d));
    assert!(out.contains("parameters:"));
    let metrics = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("risk,horizon_level,horizon_time,ctd,brier,n_pairs\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
    assert!(d.join("ev/manifest.json").exists());

    ok(dsm(&["eval", "--model", "model.txt", "--data", "syn.csv", "--horizons", "0.5,1", "--out", "abs"], d));
    let abs = fs::read_to_string(d.join("abs/metrics.csv")).unwrap();
    assert!(abs.lines().nth(1).unwrap().starts_with("1,,0.5,"), "{abs}");

    ok(dsm(&["embed", "--model", "model.txt", "--data", "syn.csv", "--out", "emb.csv"], d));
    let emb = fs::read_to_string(d.join("emb.csv")).unwrap();
    assert_eq!(emb.lines().count(), 401);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 8);
}

#[test]
fn training_twice_gives_identical_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dsm(&["generate", "--n", "300", "--seed", "5", "--out", "syn.csv"], d));
    for out in ["a.txt", "b.txt"] {
        let mut args = vec!["train", "--data", "syn.csv", "--out", out, "--seed", "9"];
        args.extend(SMALL);
        ok(dsm(&args, d));
    }
    assert_eq!(fs::read(d.join("a.txt")).unwrap(), fs::read(d.join("b.txt")).unwrap());
}

#[test]
fn cv_and_ablation_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dsm(&["generate", "--n", "300", "--seed", "4", "--out", "syn.csv"], d));
    let mut args = vec!["cv", "--data", "syn.csv", "--folds", "2", "--out", "cv", "--set", "k=2,3"];
    args.extend(&SMALL[2..]);
    let out = ok(dsm(&args, d));
    assert!(out.contains("best config"));
    let folds = fs::read_to_string(d.join("cv/folds.csv")).unwrap();
    assert!(folds.starts_with("config_hash,fold,risk,horizon_level,horizon_time,ctd,brier,n_pairs\n"));
    // 2 configs × 2 folds × 2 risks × 4 levels
    assert_eq!(folds.lines().count(), 1 + 32);
    let summary = json(&d.join("cv/summary.json"));
    assert_eq!(summary["configs"].as_array().unwrap().len(), 2);
    assert!(json(&d.join("cv/manifest.json"))["outputs"].as_array().unwrap().len() == 2);

    let mut args = vec!["ablate-censoring", "--data", "syn.csv", "--folds", "2", "--fractions", "0,0.5", "--out", "abl"];
    args.extend(SMALL);
    ok(dsm(&args, d));
    for f in ["fraction_0", "fraction_0.5"] {
        assert!(d.join("abl").join(f).join("summary.json").exists());
        assert!(d.join("abl").join(f).join("manifest.json").exists());
    }
    let table = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 4);
}

#[test]
fn transfer_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["transfer", "--n", "600", "--data-seed", "2", "--folds", "3", "--out", "tr"];
    args.extend(SMALL);
    let out = ok(dsm(&args, d));
    assert!(out.contains("dsm_embedding") && out.contains("raw_features"), "{out}");
    let csv = fs::read_to_string(d.join("tr/transfer.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(d.join("tr/embeddings_b.csv").exists());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.csv"), "a,time,event\n1,2,1\n2,zz,0\n").unwrap();
    let mut args = vec!["train", "--data", "bad.csv", "--out", "m.txt"];
    args.extend(SMALL);
    let out = dsm(&args, d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(!d.join("m.txt").exists());

    assert!(!dsm(&["eval", "--model", "missing.txt", "--data", "bad.csv", "--out", "x"], d).status.success());
    fs::write(d.join("c.cfg"), "k = 4\nbogus = 1\n").unwrap();
    fs::write(d.join("ok.csv"), "a,time,event\n1,2,1\n2,3,0\n").unwrap();
    let out = dsm(&["cv", "--data", "ok.csv", "--config", "c.cfg", "--out", "o"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    // a grid is not a single configuration
    assert!(!dsm(&["train", "--data", "ok.csv", "--out", "m.txt", "--set", "k=2,3"], d).status.success());
}

#[test]
fn eval_rejects_mismatched_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dsm(&["generate", "--n", "200", "--seed", "1", "--out", "syn.csv"], d));
    let mut args = vec!["train", "--data", "syn.csv", "--out", "m.txt"];
    args.extend(SMALL);
    ok(dsm(&args, d));
    ok(dsm(&["generate", "--n", "200", "--seed", "1", "--block-dim", "2", "--out", "other.csv"], d));
    let out = dsm(&["eval", "--model", "m.txt", "--data", "other.csv", "--out", "ev"], d);
    assert!(!out.status.success());
}
