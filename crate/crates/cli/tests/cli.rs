use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rcgrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcgrl"))
        .args(args)
        .current_dir(dir)
        .env("RCGRL_RUNS_DIR", dir.join("runs"))
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

/// The JSON summary printed last on stdout.
fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn dataset(dir: &Path) -> PathBuf {
    let out = rcgrl(dir, &["generate", "--n", "90", "--bias", "0.9", "--seed", "1", "--out", "d.jsonl"]);
    summary(&out);
    dir.join("d.jsonl")
}

const TINY: &str = r#"{"train": {"max_epochs": 2, "hidden": 6, "iv_hidden": 6, "batch_size": 16}}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn generated_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ds = rcgrl::load_dataset(dataset(dir.path())).unwrap();
    assert_eq!(ds.graphs.len(), 90);
    assert_eq!(ds.metadata["gen_config"]["seed"], 1);
}

#[test]
fn flags_override_the_config_file_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    std::fs::write(dir.path().join("c.json"), r#"{"train": {"lr": 0.001, "max_epochs": 1, "hidden": 6}}"#).unwrap();
    let out = rcgrl(dir.path(), &["train", "--config", "c.json", "--lr", "0.01", "--data", "d.jsonl"]);
    let s = summary(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("overrides train.lr"));
    let run = PathBuf::from(s["run_dir"].as_str().unwrap());
    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(&run).join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["lr"], 0.01);
    assert_eq!(resolved["train"]["hidden"], 6);
    assert_eq!(resolved["data"], "d.jsonl");
    assert!(run.starts_with(dir.path().join("runs")));
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("train-"));
}

#[test]
fn runs_are_reproducible_from_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    tiny_config(dir.path());
    let a = summary(&rcgrl(dir.path(), &["train", "--config", "tiny.json", "--data", "d.jsonl", "--run-dir", "a"]));
    let resolved = dir.path().join("a/config.json");
    let b = summary(&rcgrl(dir.path(), &["train", "--config", resolved.to_str().unwrap(), "--run-dir", "b"]));
    assert_eq!(a["best_epoch"], b["best_epoch"]);
    for f in ["metrics.csv", "checkpoint.json", "config.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    // same resolved config, same hash in the run directory name
    let c = summary(&rcgrl(dir.path(), &["train", "--config", "tiny.json", "--data", "d.jsonl"]));
    let d = summary(&rcgrl(dir.path(), &["train", "--config", "tiny.json", "--data", "d.jsonl"]));
    let prefix = |v: &Value| v["run_dir"].as_str().unwrap().rsplit_once('-').unwrap().0.to_string();
    assert_eq!(prefix(&c), prefix(&d));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let help = String::from_utf8(rcgrl(dir.path(), &["compare", "--help"]).stdout).unwrap();
    let train = serde_json::to_value(rcgrl::TrainConfig::default()).unwrap();
    for key in train.as_object().unwrap().keys() {
        assert!(help.contains(&format!("train.{key} [default: ")), "missing {key}");
    }
    for key in ["split", "budget", "u_values", "seeds", "modes"] {
        assert!(help.contains(&format!("analysis.{key} [default: ")), "missing {key}");
    }
    let help = String::from_utf8(rcgrl(dir.path(), &["generate", "--help"]).stdout).unwrap();
    let gen = serde_json::to_value(rcgrl::synth::GenConfig::default()).unwrap();
    for key in gen.as_object().unwrap().keys() {
        assert!(help.contains(&format!("generate.{key} [default: ")), "missing {key}");
    }
}

#[test]
fn errors_exit_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = rcgrl(dir.path(), &["train", "--no-such-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "config");

    let out = rcgrl(dir.path(), &["train", "--data", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"]["code"], 3);

    dataset(dir.path());
    let out = rcgrl(dir.path(), &["train", "--data", "d.jsonl", "--u", "9"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rcgrl(dir.path(), &["generate", "--bias", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = rcgrl(dir.path(), &["train", "--config", "bad.json", "--data", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["error"]["message"].as_str().unwrap().contains("learning_rate"));

    // opposite-signed huge features make the projected messages +inf and -inf
    let big = 1.7e308;
    let d = 8;
    let lines_header = format!(r#"{{"num_classes": 2, "feature_dim": {d}, "metadata": {{}}}}"#);
    let mut lines = vec![lines_header];
    for (i, split) in ["train", "val"].iter().enumerate() {
        let feat = vec![vec![big; d], vec![-big; d], vec![0.0; d], vec![big; d]];
        lines.push(
            serde_json::json!({"id": format!("g{i}"), "num_nodes": 4, "node_feat": feat,
                "edge_index": [[0, 2], [1, 2], [3, 2]], "label": i, "causal_edge_mask": null, "split": split})
            .to_string(),
        );
    }
    std::fs::write(dir.path().join("huge.jsonl"), lines.join("\n") + "\n").unwrap();
    let out = rcgrl(dir.path(), &["train", "--data", "huge.jsonl", "--mode", "erm", "--max-epochs", "3"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_line(&out)["error"]["kind"], "numeric");
}

#[test]
fn eval_and_analyze_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    tiny_config(dir.path());
    let t = summary(&rcgrl(dir.path(), &["train", "--config", "tiny.json", "--data", "d.jsonl"]));
    let ck = t["checkpoint"].as_str().unwrap();
    let e = summary(&rcgrl(dir.path(), &["eval", "--checkpoint", ck, "--data", "d.jsonl", "--split", "val"]));
    assert_eq!(e["split"], "val");
    assert!(e["kept_confounder_fraction"].is_number());
    let a = summary(&rcgrl(dir.path(), &["analyze", "--checkpoint", ck, "--data", "d.jsonl", "--budget", "2"]));
    let run = PathBuf::from(a["run_dir"].as_str().unwrap());
    assert!(run.join("granger.csv").exists());
    assert!(run.join("confounder.csv").exists());
    assert!(a["pruned_accuracy"].as_f64().unwrap() >= 0.0);
    let out = rcgrl(dir.path(), &["analyze", "--checkpoint", ck, "--data", "d.jsonl", "--budget", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_prints_mean_and_std_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    tiny_config(dir.path());
    let out = rcgrl(dir.path(), &["compare", "--config", "tiny.json", "--data", "d.jsonl", "--seeds", "2"]);
    let s = summary(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("rcgrl") && l.contains('±')));
    assert!(text.lines().any(|l| l.starts_with("erm") && l.contains('±')));
    let run = PathBuf::from(s["run_dir"].as_str().unwrap());
    let csv = std::fs::read_to_string(run.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "mode,runs,mean,std");
    assert_eq!(std::fs::read_to_string(run.join("runs.csv")).unwrap().lines().count(), 5);
}

#[test]
fn sweep_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    tiny_config(dir.path());
    let s = summary(&rcgrl(dir.path(), &["sweep-u", "--config", "tiny.json", "--data", "d.jsonl", "--u-values", "0,4"]));
    assert_eq!(s["rows"].as_array().unwrap().len(), 2);
    let run = PathBuf::from(s["run_dir"].as_str().unwrap());
    assert!(std::fs::read_to_string(run.join("sweep.svg")).unwrap().starts_with("<svg"));
    let csv = run.join("sweep.csv");
    let p = summary(&rcgrl(dir.path(), &["plot", "--input", csv.to_str().unwrap(), "--out", "again.svg"]));
    assert_eq!(p["output"], "again.svg");
    assert_eq!(std::fs::read(dir.path().join("again.svg")).unwrap(), std::fs::read(run.join("sweep.svg")).unwrap());
}
