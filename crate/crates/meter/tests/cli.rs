//! The binary's exit codes and artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn meter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meter")).args(args).output().unwrap()
}

fn out_dir_arg(dir: &Path) -> String {
    format!("paths.out_dir={}", dir.display())
}

#[test]
fn span_objective_without_decoder_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = meter(&["pretrain", "--set", "objectives=span_lm", "--set", &out_dir_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("span_lm"), "{err}");
    // rejected before any work starts
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    for set in ["fusion.kindd=merged", "fusion.kind=stacked", "train.steps=many", "noequals"] {
        let out = meter(&["pretrain", "--print-config", "--set", set]);
        assert_eq!(out.status.code(), Some(1), "{set}");
    }
    assert_eq!(meter(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.ckpt");
    let out = meter(&[
        "eval",
        "--set",
        &out_dir_arg(dir.path()),
        "--set",
        &format!("paths.checkpoint={}", ckpt.display()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_reflects_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# toy run\nfusion.kind = merged\ntrain.steps = 7\n").unwrap();
    let out = meter(&["pretrain", "--print-config", "-c", file.to_str().unwrap(), "--set", "train.steps=9"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("fusion.kind = merged\n"));
    assert!(text.contains("train.steps = 9\n"));
}

#[test]
fn pretrain_writes_checkpoint_metrics_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = meter(&[
        "pretrain",
        "--set",
        "fusion.kind=coattn",
        "--set",
        "objectives=mlm,itm",
        "--set",
        "train.steps=6",
        "--set",
        "train.eval_every=3",
        "--set",
        "data.corpus_size=8",
        "--set",
        &out_dir_arg(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "metrics.jsonl", "config.resolved"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = meter(&["gen-data", "--set", "data.corpus_size=3", "--set", &out_dir_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ppms = walk(dir.path()).into_iter().filter(|p| p.extension().is_some_and(|e| e == "ppm")).count();
    assert_eq!(ppms, 3);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
