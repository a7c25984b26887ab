use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gmope(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmope"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .env_remove("GMOPE_CACHE_DIR")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config() -> Value {
    json!({
        "data": {"synthetic": [{
            "name": "sbm", "domain": "citation", "seed": 3,
            "sbm": {"graphs": 1, "nodes": 60, "blocks": 3, "p_in": 0.2, "p_out": 0.02, "feature_dim": 10,
                    "generator": {"kind": "gaussian", "separation": 2.0}}
        }]},
        "alignment": {"dim": 8},
        "model": {"experts": 2, "prompt_dim": 3, "layers": 2, "hidden_dim": 8, "output_dim": 8},
        "train": {"epochs": 2, "episodes": 4, "batch_size": 32},
        "eval": {"dataset": "sbm", "task": {"kind": "node"}, "seeds": [41]},
    })
}

#[test]
fn unknown_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmope(&["params", "--preset", "citation", "--set", "model.nonsense=3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model"), "{}", stderr(&out));
}

#[test]
fn missing_cache_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmope(&["pretrain", "--preset", "citation", "--set", "data.cache_dir=\"nowhere\""], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn single_expert_prompt_count_equals_prompt_dim() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmope(&["params", "--preset", "citation", "--set", "model.M=1"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    let row = text.lines().find(|l| l.contains("prompt")).unwrap();
    assert!(row.split_whitespace().any(|w| w == "64"), "{text}");
}

#[test]
fn overrides_reach_resolved_config_and_single_seed_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), small_config().to_string()).unwrap();
    let out = gmope(&["pretrain", "--config", "config.json", "--set", "train.lambda=0.5", "--out", "pre"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("pre/resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["lambda"], json!(0.5));

    let out = gmope(
        &["finetune", "--config", "config.json", "--checkpoint", "pre/checkpoint.bin", "--out", "fine"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(dir.path().join("fine/summary.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let row = reader.records().next().unwrap().unwrap();
    let std_col = headers.iter().position(|h| h == "std").unwrap();
    assert_eq!(row[std_col].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn incompatible_checkpoint_exits_with_configuration_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), small_config().to_string()).unwrap();
    assert!(gmope(&["pretrain", "--config", "config.json", "--out", "pre"], dir.path()).status.success());
    let out = gmope(
        &["finetune", "--config", "config.json", "--set", "model.experts=3", "--checkpoint", "pre/checkpoint.bin"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn empty_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmope(&["ablate", "--preset", "citation", "--sweep", "train.lambda="], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
