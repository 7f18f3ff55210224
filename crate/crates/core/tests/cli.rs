//! Contract tests of the `privpool` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use privpool::data::{Dataset, Split, TextureOracle};
use sha2::{Digest, Sha256};

fn privpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privpool"))
        .args(args)
        .env("PRIVPOOL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = privpool(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: &str) -> PathBuf {
    small_dataset_in(&dir.join(format!("data-{seed}")), seed)
}

fn small_dataset_in(out: &Path, seed: &str) -> PathBuf {
    ok(&[
        "gen-data", "--out", s(out), "--classes", "3", "--per-class", "4", "--eval-per-class", "2", "--image-size", "32",
        "--seed", seed,
    ]);
    out.to_path_buf()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, r#"{"model":{"channels":[4,8],"d_reduced":4},"train":{"batch":4}}"#).unwrap();
    path
}

fn train(dir: &Path, data: &Path, pool: &str) -> PathBuf {
    let out = dir.join(format!("run-{pool}"));
    let cfg = tiny_config(dir);
    ok(&[
        "train", "--data", s(data), "--pool", pool, "--epochs", "1", "--seed", "3", "--config", s(&cfg), "--out", s(&out),
    ]);
    out
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn gen_data_writes_manifest_with_five_splits_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_dataset(tmp.path(), "5");
    let ds = Dataset::open(&a).unwrap();
    assert_eq!(ds.manifest.splits.len(), 5);
    for split in Split::ALL {
        assert!(ds.split_len(split) > 0, "{split}");
    }
    assert!(a.join("images").is_dir() && a.join("annotations.jsonl").is_file());
    assert!(a.join("resolved_config.json").is_file());

    let b = small_dataset_in(&tmp.path().join("again"), "5");
    assert_ne!(a, b);
    assert_eq!(sha(&a.join("manifest.json")), sha(&b.join("manifest.json")));
    assert_eq!(sha(&a.join("annotations.jsonl")), sha(&b.join("annotations.jsonl")));
}

#[test]
fn gen_data_refuses_non_empty_directory_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "1");
    let args = ["gen-data", "--out", s(&data), "--classes", "3", "--per-class", "4", "--eval-per-class", "2", "--image-size", "32"];
    let out = privpool(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn bias_flag_controls_the_texture_shortcut() {
    let tmp = tempfile::tempdir().unwrap();
    let gap = |bias: &str| {
        let out = tmp.path().join(format!("bias-{bias}"));
        ok(&["gen-data", "--out", s(&out), "--bias", bias, "--per-class", "30", "--eval-per-class", "30"]);
        let ds = Dataset::open(&out).unwrap();
        let oracle = TextureOracle::fit(&ds.load_split(Split::Train).unwrap(), ds.manifest.num_classes());
        oracle.accuracy(&ds.load_split(Split::TestCis).unwrap()) - oracle.accuracy(&ds.load_split(Split::TestTrans).unwrap())
    };
    let (unbiased, biased) = (gap("0"), gap("0.9"));
    assert!(unbiased < 0.1, "gap at bias 0: {unbiased}");
    assert!(biased > 0.5, "gap at bias 0.9: {biased}");
}

#[test]
fn train_writes_checkpoint_metrics_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "2");

    let avg = train(tmp.path(), &data, "avg");
    let names = |dir: &Path| -> Vec<String> {
        std::fs::read_dir(dir.join("checkpoint"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect()
    };
    let avg_names = names(&avg);
    assert!(avg_names.iter().all(|n| !n.starts_with("attention.")), "{avg_names:?}");

    let metrics = std::fs::read_to_string(avg.join("metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ["iteration", "lr", "ce", "attn", "reg", "total", "wall_ms"]);
    assert_eq!(metrics.lines().count(), 1 + 3);

    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(avg.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["pool"], "avg");
    assert_eq!(resolved["model"]["channels"], serde_json::json!([4, 8]));
    assert_eq!(resolved["train"]["epochs"], 1);
    assert_eq!(resolved["train"]["seed"], 3);

    let cov_pr_names = names(&train(tmp.path(), &data, "cov_pr"));
    for prefix in ["attention.hidden", "attention.out", "reduction."] {
        assert!(cov_pr_names.iter().any(|n| n.starts_with(prefix)), "{prefix} missing from {cov_pr_names:?}");
    }
}

#[test]
fn unknown_pool_mode_is_a_usage_error_listing_modes() {
    let out = privpool(&["train", "--data", "x", "--out", "y", "--pool", "max"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for mode in ["avg", "avg_pr", "cov", "cov_pr"] {
        assert!(err.contains(mode), "{err}");
    }
}

#[test]
fn eval_writes_reports_and_rejects_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "4");
    let run = train(tmp.path(), &data, "avg_pr");
    let ckpt = run.join("checkpoint");
    let out = tmp.path().join("eval");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "test_trans", "--out", s(&out)]);
    assert!(stdout.contains("top-1"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 6);
    assert_eq!(report["split"], "test_trans");
    let confusion = std::fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 1 + 3);

    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "test_cis", "--crop-refeed"]);
    assert!(run.join("eval-test_cis-crop-refeed/report.json").is_file());

    let missing = privpool(&["eval", "--ckpt", s(&tmp.path().join("nope")), "--data", s(&data), "--split", "test_cis"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn export_attention_clamps_n_and_writes_all_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "6");
    let ckpt = train(tmp.path(), &data, "cov_pr").join("checkpoint");
    let out = tmp.path().join("attn");
    let res = privpool(&[
        "export-attention", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "val_trans", "--n", "100", "--out", s(&out),
    ]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    // 6 samples, each with input, overlay, mean, 3 keypoint maps and 1 complementary map
    assert_eq!(pngs, 6 * 7);
    assert!(out.join("resolved_config.json").is_file());
}

#[test]
fn check_suites_report_worst_errors_and_exit_codes() {
    let out = ok(&["check", "--suite", "pool-identities"]);
    assert!(out.lines().filter(|l| l.starts_with("PASS pool-identities/")).count() >= 5, "{out}");

    let sqrt = privpool(&["check", "--suite", "sqrt"]);
    let text = String::from_utf8_lossy(&sqrt.stdout);
    let line = text.lines().find(|l| l.contains("sqrt/residual")).expect("residual line");
    assert!(line.contains("worst"), "{line}");
    let all_passed = text.lines().filter(|l| l.contains("sqrt/")).all(|l| l.starts_with("PASS"));
    assert_eq!(sqrt.status.code(), Some(if all_passed { 0 } else { 1 }));

    let bad = privpool(&["check", "--suite", "everything"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
}
