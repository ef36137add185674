use std::path::Path;
use std::process::Command;

use patchtroj::harness::checkpoint::load_checkpoint;
use patchtroj::harness::report::ExperimentReport;

const TINY: &[&str] = &[
    "--set", "train_per_class=8",
    "--set", "test_per_class=6",
    "--set", "train_epochs=1",
    "--set", "attack_batch=8",
    "--set", "trigger_steps=4",
    "--set", "insert_epochs=2",
    "--set", "e_sweep=0,0.0005",
];

fn run(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_patchtroj"))
        .arg("--out")
        .arg(out)
        .args(args)
        .args(TINY)
        .output()
        .expect("binary runs")
}

#[test]
fn staged_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for stage in ["train-clean", "gen-trigger", "insert-trojan", "flip-apply", "evaluate", "defend"] {
        let o = run(out, &["--stage", stage, "--seed", "3"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "clean.tvck", "clean_q.tvck", "trigger.tvtg", "trojan_q.tvck", "flips.tvbf", "flipped_q.tvck",
        "metrics.json", "defense.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let trojan = load_checkpoint(out.join("trojan_q.tvck")).unwrap();
    let flipped = load_checkpoint(out.join("flipped_q.tvck")).unwrap();
    assert_eq!(trojan, flipped);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["backdoored"]["tar"], 6.25);
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = run(out, &["sweep"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "timings.json", "clean.tvck", "clean_q.tvck", "trigger.tvtg", "trojan_q.tvck", "flips.tvbf"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.flips_verified);
    assert_eq!(report.e_sweep.len(), 2);
    let text = run(out, &["report"]);
    assert!(text.status.success());
    assert!(String::from_utf8_lossy(&text.stdout).contains("TPN"));
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run(out, &[]).status.code(), Some(2));
    assert_eq!(run(out, &["train-clean", "--set", "bogus=1"]).status.code(), Some(2));
    // Nothing trained yet.
    assert_eq!(run(out, &["gen-trigger"]).status.code(), Some(7));

    assert!(run(out, &["train-clean"]).status.success());
    std::fs::write(out.join("flips.tvbf"), b"XXXX\x01").unwrap();
    let o = run(out, &["flip-apply"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flip-apply"));

    let cfg = out.join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(run(out, &["train-clean", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn config_file_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("exp.cfg");
    std::fs::write(&cfg, "# tiny\nseed = 5\ntrain_per_class = 4\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_patchtroj"))
        .args(["train-clean", "--seed", "9", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(out)
        .args(["--set", "test_per_class=3", "--set", "train_epochs=1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("train.json")).unwrap()).unwrap();
    assert_eq!(train["seed"], 9);
    assert_eq!(train["n_train"], 16);
    assert_eq!(train["n_test"], 12);
}
