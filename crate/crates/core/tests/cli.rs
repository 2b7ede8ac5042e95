//! End-to-end tests of the `hfr` binary on a tiny configuration.
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfr_adapt::cli::config::RunConfig;
use serde_json::Value;

const TINY: &str = r#"{
  "data": {"n_ids": 12, "samples_per_id": 3},
  "pretrain": {"n_ids": 16, "epochs": 1},
  "train": {"epochs": 1, "batch_size": 8},
  "eval": {"n_folds": 2}
}"#;

fn hfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfr")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Tiny {
    dir: tempfile::TempDir,
    config: PathBuf,
    pretrained: PathBuf,
}

fn tiny() -> Tiny {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let pretrained = dir.path().join("pre.xefw");
    let out = hfr(&["pretrain", "--config", s(&config), "--out", s(&pretrained)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    Tiny { dir, config, pretrained }
}

#[test]
fn print_defaults_round_trips() {
    let out = hfr(&["--print-defaults"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = RunConfig::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn missing_subcommand_and_bad_flags_exit_1() {
    assert_eq!(hfr(&[]).status.code(), Some(1));
    assert_eq!(hfr(&["pretrain"]).status.code(), Some(1));
    assert_eq!(hfr(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn complexity_reports_json_and_grows_with_width() {
    let out = hfr(&["complexity"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["params_total"], 21880);
    assert_eq!(v["macs_per_sample"], 198400);
    assert_eq!(v["params_per_group"]["LN"], 496);

    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("wide.json");
    std::fs::write(&wide, r#"{"backbone": {"embed_dim": 64}}"#).unwrap();
    let w = stdout_json(&hfr(&["complexity", "--config", s(&wide)]));
    assert!(w["params_total"].as_u64() > v["params_total"].as_u64());

    std::fs::write(&wide, r#"{"backbone": {"embed_dims": 64}}"#).unwrap();
    assert_eq!(hfr(&["complexity", "--config", s(&wide)]).status.code(), Some(1));
}

#[test]
fn gradcheck_lists_every_case_once_and_catches_corruption() {
    let out = hfr(&["gradcheck", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for op in hfr_adapt::gradcheck::CASES {
        let n = text.lines().filter(|l| l.split_whitespace().next() == Some(op)).count();
        assert_eq!(n, 1, "{op}");
    }
    let bad = hfr(&["gradcheck", "--seeds", "1", "--corrupt", "gelu"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gelu"));
}

#[test]
fn pretrain_rejects_bad_config_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let out_path = dir.path().join("never.xefw");
    for text in ["{ nope", r#"{"train": {"lamda": 0.5}}"#] {
        std::fs::write(&cfg, text).unwrap();
        let out = hfr(&["pretrain", "--config", s(&cfg), "--out", s(&out_path)]);
        assert_eq!(out.status.code(), Some(1), "{text}");
        assert!(!out_path.exists());
    }
}

#[test]
fn pretrain_is_deterministic_and_shows_a_gap() {
    let t = tiny();
    let bytes = std::fs::read(&t.pretrained).unwrap();
    assert_eq!(&bytes[..4], b"XEFW");
    let again = t.dir.path().join("again.xefw");
    let out = hfr(&["pretrain", "--config", s(&t.config), "--out", s(&again)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    let v = stdout_json(&out);
    assert!(v["source_eer"].as_f64().is_some() && v["cross_eer"].as_f64().is_some());
}

#[test]
fn adapt_noops_and_frozen_contract() {
    let t = tiny();
    let before = std::fs::read(&t.pretrained).unwrap();
    for extra in [vec!["--layers", ""], vec!["--layers", "LN,ST", "--lambda", "1.0"]] {
        let out_path = t.dir.path().join("noop.xefw");
        let mut args = vec!["adapt", "--pretrained", s(&t.pretrained), "--config", s(&t.config), "--out", s(&out_path)];
        args.extend(extra.iter().copied());
        let out = hfr(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read(&out_path).unwrap(), before, "{extra:?}");
    }

    let out_path = t.dir.path().join("s0.xefw");
    let out = hfr(&["adapt", "--pretrained", s(&t.pretrained), "--config", s(&t.config), "--layers", "LN,ST,S0", "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["frozen_intact"], true);
    assert!(v["partition"]["n_adapted_params"].as_u64().unwrap() > 0);
    assert_ne!(std::fs::read(&out_path).unwrap(), before);
    let log = std::fs::read_to_string(out_path.with_extension("csv")).unwrap();
    assert!(log.starts_with("step,l_c,l_sdl,l_total\n"));
    assert_eq!(std::fs::read(&t.pretrained).unwrap(), before, "input file modified");

    let bad = hfr(&["adapt", "--pretrained", s(&t.pretrained), "--layers", "LN,XX", "--out", s(&out_path)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("LN,ST,S0"));
}

#[test]
fn eval_reports_are_stable_and_well_formed() {
    let t = tiny();
    let report = |protocol: &str, name: &str| {
        let path = t.dir.path().join(name);
        let out = hfr(&["eval", "--model", s(&t.pretrained), "--protocol", protocol, "--config", s(&t.config), "--report", s(&path)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(&path).unwrap()
    };
    let a = report("cross", "a.json");
    assert_eq!(report("cross", "b.json"), a);
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["n_folds"], 2);
    for key in ["auc", "eer", "rank1", "vr_at_far"] {
        assert!(v["mean"].get(key).is_some() && v["std"].get(key).is_some(), "{key}");
    }
    for key in ["5e-2", "1e-2", "1e-3", "1e-4"] {
        assert!(v["mean"]["vr_at_far"].get(key).is_some(), "{key}");
    }
    let missing = hfr(&["eval", "--model", "/nonexistent.xefw", "--report", s(&t.dir.path().join("x.json"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn ablate_writes_tables() {
    let t = tiny();
    let out_dir = t.dir.path().join("ablate");
    let out = hfr(&[
        "ablate",
        "--config",
        s(&t.config),
        "--layers-sweep",
        "baseline;LN",
        "--lambda-sweep",
        "0.5,1",
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let read = |name: &str| {
        let mut r = csv::Reader::from_path(out_dir.join(name)).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["config", "AUC", "EER", "Rank-1", "VR@FAR=1%"]);
        r.records().map(|r| r.unwrap().iter().map(String::from).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let layers = read("layers.csv");
    let lambdas = read("lambda.csv");
    assert_eq!(layers.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["baseline", "LN"]);
    assert_eq!(lambdas.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0.50", "1.00"]);
    // λ = 1 leaves the weights untouched, so its row equals the baseline row
    assert_eq!(lambdas[1][1..], layers[0][1..]);
    assert_eq!(hfr(&["ablate", "--config", s(&t.config), "--out-dir", s(&out_dir)]).status.code(), Some(1));
}
