use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsmoe::experts::Dims;
use dsmoe::harness::{CorpusConfig, RunConfig};
use dsmoe::model::ModelConfig;
use dsmoe::training::{StageBudgets, TrainConfig};

fn dsmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmoe")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path, out: &str) -> PathBuf {
    let cfg = RunConfig {
        model: ModelConfig { dims: Dims { d_model: 16, ff: 24, window: 24, slots: 8 }, ..Default::default() },
        train: TrainConfig { budgets: StageBudgets::scaled(100), batch: 2, ..Default::default() },
        corpus: CorpusConfig { total: 300, eval_per_tier: 4, ..Default::default() },
        seed: 5,
        out_dir: dir.join(out),
        ..Default::default()
    };
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    for (name, seed) in [("a.jsonl", "4"), ("b.jsonl", "4"), ("c.jsonl", "5")] {
        let o = dsmoe(&["gen", "--seed", seed, "--total", "500", "--out", &p(name)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(p("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(p("b.jsonl")).unwrap());
    assert_ne!(a, fs::read(p("c.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 500);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dsmoe(&[])), 2);
    assert_eq!(code(&dsmoe(&["frobnicate"])), 2);
    assert_eq!(code(&dsmoe(&["train", "--ablation", "no-such-variant"])), 2);
    assert_eq!(code(&dsmoe(&["gen", "--total", "many"])), 2);
    assert_eq!(code(&dsmoe(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = dsmoe(&["eval", "--model", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(code(&dsmoe(&["trace", missing.to_str().unwrap()])), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 3\n").unwrap();
    assert_eq!(code(&dsmoe(&["gen", "--config", bad.to_str().unwrap()])), 1);
    assert_eq!(code(&dsmoe(&["gen", "--total", "0", "--out", missing.to_str().unwrap()])), 1);
}

#[test]
fn tiny_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = tiny_config(dir.path(), "run");
    let run = dir.path().join("run");

    let o = dsmoe(&["train", "--config", &s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| variant |"));
    for f in ["config.toml", "metrics.csv", "traces.jsonl", "utilization.csv", "stages.json", "train_log.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    for f in ["weights.ckpt", "model.toml", "thresholds.json", "experts.json"] {
        assert!(run.join("model").join(f).is_file(), "{f}");
    }
    let first = fs::read_to_string(run.join("traces.jsonl")).unwrap();
    let first = first.lines().next().unwrap();
    for key in ["input_id", "tier", "d_syn", "c_sem", "\"r\"", "\"C\"", "probs", "selected", "steps", "expert_id", "kind", "macs", "halt_prob", "total_macs", "correct"] {
        assert!(first.contains(key), "trace lacks {key}: {first}");
    }

    // same config, same bytes
    let again = tiny_config(dir.path(), "again");
    assert_eq!(code(&dsmoe(&["train", "--config", &s(&again)])), 0);
    for f in ["metrics.csv", "traces.jsonl", "utilization.csv", "train_log.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(dir.path().join("again").join(f)).unwrap(), "{f}");
    }

    // a saved model evaluates to the same metrics and traces
    let trained = (fs::read(run.join("metrics.csv")).unwrap(), fs::read(run.join("traces.jsonl")).unwrap());
    let o = dsmoe(&["eval", "--config", &s(&cfg), "--model", &s(&run.join("model"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(trained.0, fs::read(run.join("metrics.csv")).unwrap());
    assert_eq!(trained.1, fs::read(run.join("traces.jsonl")).unwrap());

    let o = dsmoe(&["trace", &s(&run.join("traces.jsonl")), "--limit", "2"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("MACs"));
    assert_eq!(code(&dsmoe(&["trace", &s(&run.join("traces.jsonl")), "--id", "999999999"])), 1);

    let report_out = dir.path().join("report");
    let o = dsmoe(&["report", "--out", &s(&report_out), &s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stdout.is_empty());

    let o = dsmoe(&["cost", "--n", "48"]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.lines().count() > 20 && csv.contains("udt"));

    // a tampered registry is refused
    let reg = run.join("model").join("experts.json");
    let text = fs::read_to_string(&reg).unwrap().replacen("\"checksum\": \"", "\"checksum\": \"0", 1);
    fs::write(&reg, text).unwrap();
    assert_eq!(code(&dsmoe(&["eval", "--config", &s(&cfg), "--model", &s(&run.join("model"))])), 1);
}

#[test]
fn ablate_runs_selected_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "abl");
    let o = dsmoe(&["ablate", "--config", cfg.to_str().unwrap(), "--only", "full,no-mie"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("abl");
    assert!(out.join("full").join("metrics.csv").is_file());
    assert!(out.join("no-mie").join("metrics.csv").is_file());
    assert!(!out.join("deep-only").exists());
    let md = fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(md.contains("## full") && md.contains("## no-mie"));
}
