use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stct")).args(args).output().expect("spawn stct")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn benchmark_dir(root: &Path) -> PathBuf {
    let spec = root.join("spec.conf");
    fs::write(&spec, "# benchmark\nclasses = 10\nn = 5000\nd = 32\nsep = 6.0\nseed = 17\ntest_n = 200\n").unwrap();
    let ds = root.join("ds");
    let out = stct(&["gen", "--spec", s(&spec), "--out", s(&ds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ds
}

#[test]
fn gen_corrupt_nmc_matches_persisted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = benchmark_dir(dir.path());
    for f in ["features.stm", "clean_labels.stm", "test_features.stm", "test_clean_labels.stm", "spec.json"] {
        assert!(ds.join(f).exists(), "{f}");
    }
    let out = stct(&["corrupt", "--in", s(&ds), "--noise", "sym", "--rate", "0.8", "--convention", "include", "--seed", "1"]);
    assert!(out.status.success());
    assert!(ds.join("noisy_labels.stm").exists() && ds.join("mask.stm").exists());

    let out = stct(&["nmc", "--in", s(&ds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ds.join("nmc/summary.json")).unwrap()).unwrap();
    let expected: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture("nmc_benchmark_rho0.8.json")).unwrap()).unwrap();
    let got = summary["label_acc"].as_f64().unwrap();
    let want = expected["label_acc"].as_f64().unwrap();
    assert!((got - want).abs() <= 0.005, "{got} vs persisted {want}");
    assert_eq!(summary["noisy_label_acc"], expected["noisy_label_acc"]);

    let out = stct(&["report", "--in", s(&ds.join("nmc"))]);
    assert!(out.status.success());
    let csv = fs::read_to_string(ds.join("nmc/nmc_curves.csv")).unwrap();
    assert!(csv.starts_with("epoch,round,val_loss,agreement,label_acc\n"));
    assert_eq!(csv.lines().count(), 1 + summary["rounds"].as_u64().unwrap() as usize);
}

#[test]
fn corrupt_to_a_copy_leaves_the_source_alone() {
    let dir = tempfile::tempdir().unwrap();
    let ds = benchmark_dir(dir.path());
    let copy = dir.path().join("copy");
    let out = stct(&["corrupt", "--in", s(&ds), "--noise", "asym", "--rate", "0.3", "--seed", "2", "--out", s(&copy)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!ds.join("noisy_labels.stm").exists());
    for f in ["features.stm", "noisy_labels.stm", "mask.stm", "test_features.stm", "spec.json"] {
        assert!(copy.join(f).exists(), "{f}");
    }
}

#[test]
fn stct_run_writes_report_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        "n = 600\nclasses = 3\nd = 6\ntest_n = 100\nnoise_rate = 0.4\nmax_epoch = 2\nsrl.epochs = 1\nsrl.hidden = 8\nout = run\n",
    )
    .unwrap();
    let out = stct(&["stct", "--config", s(&conf)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let lines = fs::read_to_string(run.join("report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    for f in ["summary.json", "nmc_trace.jsonl", "corrected_labels.stm", "model/manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!lines.contains("wall_ms"));
    assert!(stct(&["report", "--in", s(&run)]).status.success());
    let csv = fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn timing_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "n = 300\nclasses = 3\nd = 6\ntest_n = 0\nmax_epoch = 1\nsrl.epochs = 1\nsrl.hidden = 4\ntiming = true\n").unwrap();
    let out = stct(&["stct", "--config", s(&conf), "--out", s(&dir.path().join("o"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(dir.path().join("o/report.jsonl")).unwrap().contains("wall_ms"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stct(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(stct(&["verify", "--bogus"]).status.code(), Some(2));
    let missing = dir.path().join("nope");
    assert_eq!(stct(&["nmc", "--in", s(&missing)]).status.code(), Some(2));
    assert_eq!(stct(&["stct", "--config", s(&missing)]).status.code(), Some(2));
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "max_epochs = 3\n").unwrap();
    let out = stct(&["stct", "--config", s(&conf), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_epochs"));
    fs::write(&conf, "noise = sym\n").unwrap();
    assert_eq!(stct(&["stct", "--config", s(&conf)]).status.code(), Some(2), "no output directory");
}

#[test]
fn training_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "n = 300\nclasses = 3\nd = 6\ntest_n = 0\nmax_epoch = 1\nablation = no_labeled\n").unwrap();
    let out = stct(&["stct", "--config", s(&conf), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 1"));
}

#[test]
fn verify_against_persisted_reports() {
    let out = stct(&["verify", "--suite", "gradients", "--against", s(&fixture("oracle_reports.jsonl"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));

    let dir = tempfile::tempdir().unwrap();
    let tampered = dir.path().join("reports.jsonl");
    let text = fs::read_to_string(fixture("oracle_reports.jsonl")).unwrap();
    let edited: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if v["name"] == "meta_update_vs_fd" {
                v["implementation_value"] = serde_json::json!(0.5);
            }
            v.to_string()
        })
        .collect();
    fs::write(&tampered, edited.join("\n") + "\n").unwrap();
    let out = stct(&["verify", "--suite", "gradients", "--against", s(&tampered)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL meta_update_vs_fd"));

    let written = dir.path().join("fresh.jsonl");
    assert!(stct(&["verify", "--suite", "gradients", "--out", s(&written)]).status.success());
    assert_eq!(fs::read_to_string(&written).unwrap().lines().count(), 3);
}

#[test]
fn thread_cap_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_stct"))
        .args(["verify", "--suite", "gradients"])
        .env("STCT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_stct"))
        .args(["verify", "--suite", "gradients"])
        .env("STCT_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
}
