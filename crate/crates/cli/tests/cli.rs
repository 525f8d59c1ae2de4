//! The `comm` binary driven as a user would: exit codes, files, reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use comm_cli::{Manifest, Status, MANIFEST_FILE};

fn comm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comm"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn small_config(dir: &Path, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "world": {{"cl_classes": 4, "subsets": 2, "train_per_class": 12, "test_per_class": 6}},
  "backbone": {{"pretrain": {{"steps": 300}}, "checkpoint": "bb"}},
  "method": {{"gate_steps": 20, "realign_steps": 10}},
  "train": {{"epochs": 1{extra_train}}},
  "output": {{"dir": "runs"}}
}}"#
    );
    let p = dir.join(format!("config{}.json", extra_train.len()));
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&comm(d, &["run", "--config", "missing.json"])), 2);
    std::fs::write(d.join("typo.json"), r#"{"trian": {}}"#).unwrap();
    let o = comm(d, &["run", "--config", "typo.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    let cfg = small_config(d, "");
    let o = comm(d, &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "no checkpoint yet");
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
    assert_eq!(code(&comm(d, &["run", "--ablate", "no-gate"])), 2);
    assert_eq!(code(&comm(d, &["report"])), 2);
    assert_eq!(code(&comm(d, &["--help"])), 0);
}

#[test]
fn pretrain_run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, "");
    let cfg = cfg.to_str().unwrap();

    let o = comm(d, &["pretrain", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(out.contains("held-out retrieval"));
    let digest = |s: &str| s.lines().find(|l| l.starts_with("digest")).unwrap().to_string();
    let again = comm(d, &["pretrain", "--config", cfg]);
    assert_eq!(digest(&out), digest(&String::from_utf8_lossy(&again.stdout)));

    let o = comm(
        d,
        &["run", "--config", cfg, "--method", "comm", "--eval-mode", "both", "--seed", "0", "--seed", "1", "--jobs", "2"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = comm(d, &["run", "--config", cfg, "--method", "ft", "--scenario", "shift", "--reversed"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = comm(d, &["run", "--config", cfg, "--ablate", "no-cross,no-self"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let runs = d.join("runs");
    let mut names: Vec<String> = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "comm-no-cross-no-self-random-seed0",
            "comm-random-seed0",
            "comm-random-seed1",
            "ft-shift-reversed-seed0"
        ]
    );
    for n in &names {
        let m = Manifest::read(&runs.join(n)).unwrap();
        assert_eq!(m.status, Status::Complete);
        for a in &m.artifacts {
            assert!(runs.join(n).join(a).exists(), "{a}");
        }
    }
    let csv = std::fs::read_to_string(runs.join("comm-random-seed0/accuracy_matrix.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("specific,")));
    assert!(csv.lines().any(|l| l.starts_with("agnostic,")));

    let o = comm(d, &["report", "runs/comm-random-seed0", "runs/ft-shift-reversed-seed0", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("overall FAA"));
    assert_eq!(table.lines().filter(|l| l.starts_with("comm-random-seed0")).count(), 2);
    assert!(!table.contains("WARNING"));
    let plot = std::fs::read_to_string(d.join("rep/faa_by_step.csv")).unwrap();
    assert!(plot.starts_with("run,mode,series,t,faa"));

    // a run from another world gets flagged
    let other = runs.join("other-world");
    std::fs::create_dir_all(&other).unwrap();
    for f in ["metrics.json", "accuracy_matrix.csv", "params.csv", "train_log.json"] {
        std::fs::copy(runs.join("comm-random-seed1").join(f), other.join(f)).unwrap();
    }
    let mut m = Manifest::read(&runs.join("comm-random-seed1")).unwrap();
    m.world_seed += 1;
    m.write(&other).unwrap();
    let o = comm(d, &["report", "runs/comm-random-seed0", "runs/other-world"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("WARNING"));
}

#[test]
fn numeric_fault_flushes_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let good = small_config(d, "");
    assert_eq!(code(&comm(d, &["pretrain", "--config", good.to_str().unwrap()])), 0);
    // a stale manifest must not survive a failed run
    let run_dir = d.join("runs/ft-random-seed0");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join(MANIFEST_FILE), "{\"stale\": true}").unwrap();
    let bad = small_config(d, r#", "prompt_lr": 1e38"#);
    let o = comm(d, &["run", "--config", bad.to_str().unwrap(), "--method", "ft"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::read(&run_dir).unwrap();
    assert_eq!(m.status, Status::Failed);
    let fault = m.fault.unwrap();
    assert!(fault.contains("step"), "{fault}");
    let metrics = comm_core::runner::read_metrics(&run_dir).unwrap();
    assert!(!metrics.complete);
}

#[test]
fn dump_world_writes_tensors_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, "");
    let o = comm(d, &["dump-world", "--config", cfg.to_str().unwrap(), "--out", "w"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["world.json", "world.bin", "stream.json"] {
        assert!(d.join("w").join(f).exists(), "{f}");
    }
}
