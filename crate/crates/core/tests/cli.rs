use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use bayescope::cli::checkpoint::Checkpoint;
use bayescope::cli::experiment::predict_dataset;
use bayescope::cli::files::{file_sha256, read_dataset_file, read_predictions, PredictionMeta, write_predictions};
use bayescope::evaluation::{evaluate, EvalReport};
use bayescope::inference::UncertaintyReport;
use bayescope::par::Parallelism;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bayescope"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A config with a short training schedule so the command tests stay fast.
fn quick_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, format!(r#"{{"train": {{"epochs": 40}}{extra}}}"#)).unwrap();
    p
}

fn hashes(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), file_sha256(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn generate_is_reproducible_and_sized() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--out", s(&a), "--seed", "3"]);
    ok(&["generate", "--out", s(&b), "--seed", "3"]);
    assert_eq!(hashes(&a), hashes(&b));
    let ds = read_dataset_file(&a.join("dataset.csv")).unwrap();
    assert_eq!(ds.len(), 328);
    let text = fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 329);
    let manifest = bayescope::cli::read_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.files["dataset.csv"], file_sha256(&a.join("dataset.csv")).unwrap());
    assert_eq!(manifest.config_hash.len(), 64);
}

#[test]
fn image_mode_writes_the_container() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("img.json");
    fs::write(&cfg, r#"{"generator": {"n": 12, "mode": "image", "image_size": 10}}"#).unwrap();
    let out = tmp.path().join("out");
    ok(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(out.join("dataset.images.bin").exists());
    let ds = read_dataset_file(&out.join("dataset.csv")).unwrap();
    assert_eq!(ds.features.shape(), &[12, 10, 10, 1]);
}

#[test]
fn invalid_config_exits_2_without_writing() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"generator": {"age_range": [25, 13]}}"#).unwrap();
    let out = tmp.path().join("out");
    let res = run(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());

    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(run(&["generate", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_4() {
    let tmp = TempDir::new().unwrap();
    let res = run(&[
        "predict",
        "--checkpoint",
        s(&tmp.path().join("nope.json")),
        "--data",
        s(&tmp.path().join("nope.csv")),
    ]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn passes_default_is_20() {
    use clap::Parser;
    let cli = bayescope::cli::Cli::try_parse_from(["bayescope", "predict", "--checkpoint", "c", "--data", "d"]).unwrap();
    match cli.command {
        bayescope::cli::Command::Predict { passes, .. } => assert_eq!(passes, 20),
        _ => unreachable!(),
    }
}

#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let cfg = quick_config(root, "");
    let data = root.join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let tr = root.join("train");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tr), "--variant", "bcnn_sigma"]);
    let ck = tr.join("checkpoint.json");
    assert!(ck.exists() && tr.join("train_log.csv").exists());
    let leftovers: Vec<_> = fs::read_dir(&tr).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 2, "{leftovers:?}");

    let pred = root.join("pred");
    let test_csv = data.join("test.csv");
    ok(&["predict", "--checkpoint", s(&ck), "--data", s(&test_csv), "--out", s(&pred), "--parallel", "3"]);
    let (reports, ages, meta) = read_predictions(&pred.join("predictions.csv")).unwrap();
    let test = read_dataset_file(&test_csv).unwrap();
    assert_eq!(reports.len(), test.len());
    assert_eq!(ages, test.ages);
    let meta = meta.unwrap();
    assert_eq!(meta.passes, 20);

    // Reloading the checkpoint and re-predicting reproduces the report exactly.
    let model = Checkpoint::load(&ck).unwrap().to_model().unwrap();
    let again = predict_dataset(&model, &test, 20, meta.seed, Parallelism::Sequential).unwrap();
    assert_eq!(again, reports);

    let eval = root.join("eval");
    ok(&["evaluate", "--predictions", s(&pred.join("predictions.csv")), "--data", s(&test_csv), "--out", s(&eval)]);
    let written: EvalReport = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(written, evaluate("bcnn_sigma", &again, &test.ages).unwrap());
    assert!(eval.join("scatter.csv").exists() && eval.join("profile.csv").exists());

    // Mismatched dataset is rejected.
    let res = run(&["evaluate", "--predictions", s(&pred.join("predictions.csv")), "--data", s(&data.join("train.csv"))]);
    assert_ne!(res.status.code(), Some(0));
}

#[test]
fn deterministic_variant_mu_hat_is_pass_independent() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let cfg = quick_config(root, "");
    let data = root.join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let tr = root.join("train");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tr), "--variant", "cnn"]);
    let csv = data.join("dataset.csv");
    let (p1, p20) = (root.join("p1"), root.join("p20"));
    let ck = tr.join("checkpoint.json");
    ok(&["predict", "--checkpoint", s(&ck), "--data", s(&csv), "--passes", "1", "--out", s(&p1)]);
    ok(&["predict", "--checkpoint", s(&ck), "--data", s(&csv), "--passes", "20", "--out", s(&p20)]);
    let (a, _, _) = read_predictions(&p1.join("predictions.csv")).unwrap();
    let (b, _, _) = read_predictions(&p20.join("predictions.csv")).unwrap();
    assert_eq!(a.len(), 328);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mu_hat, y.mu_hat);
        assert_eq!(y.epistemic_var, 0.0);
    }
}

#[test]
fn perfect_predictions_score_zero_mae_and_match_the_schema() {
    let tmp = TempDir::new().unwrap();
    let ages = vec![13.5, 16.0, 19.25, 22.0, 24.5];
    let reports: Vec<UncertaintyReport> = ages
        .iter()
        .map(|&a| UncertaintyReport {
            mu_hat: a,
            epistemic_var: 0.01,
            aleatoric_var: 0.25,
            total_var: 0.01 + 0.25,
            aleatoric_learned: true,
            passes: 20,
        })
        .collect();
    let path = tmp.path().join("predictions.csv");
    let meta = PredictionMeta {
        variant: bayescope::models::Variant::BcnnSigma,
        passes: 20,
        seed: 0,
        aleatoric_learned: true,
    };
    write_predictions(&path, &reports, &ages, &meta).unwrap();
    ok(&["evaluate", "--predictions", s(&path), "--out", s(tmp.path())]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["mae"], 0.0);
    assert_eq!(json["coverage_z1"], 1.0);
    for key in [
        "variant",
        "n",
        "mae",
        "mae_std",
        "coverage_z1",
        "coverage_z2",
        "mean_epistemic_var",
        "mean_aleatoric_var",
        "profile",
    ] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    for bin in json["profile"].as_array().unwrap() {
        for key in ["age_low", "age_high", "count", "mean_epistemic_var", "mean_aleatoric_var"] {
            assert!(bin.get(key).is_some(), "missing profile.{key}");
        }
    }
}

#[test]
fn repro_writes_every_variant_and_is_byte_stable() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["repro", "--suite", "both_channels", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["repro", "--suite", "both_channels", "--config", s(&cfg), "--out", s(&b), "--parallel", "4"]);
    for v in ["cnn", "cnn_sigma", "bcnn", "bcnn_sigma"] {
        assert!(a.join(v).join("checkpoint.json").exists());
        assert!(a.join(v).join("report.json").exists());
    }
    for f in ["summary.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert_eq!(run(&["repro", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn default_cnn_training_finishes_in_time() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    ok(&["train", "--variant", "cnn", "--out", s(tmp.path())]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "{secs} s");
}
