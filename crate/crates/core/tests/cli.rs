use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn coldproxy(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldproxy"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(tiny_config())
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = coldproxy(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Every file under `dir` except manifests, which carry wall-clock fields.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().contains("manifest") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["train-stage1"],
    &["partition-layers"],
    &["train-stage2"],
    &["train-ranker", "--variant", "v3"],
    &["eval", "--variant", "v3"],
    &["gen-proxies"],
    &["viz", "--source", "coarse"],
];

#[test]
fn stage2_before_stage1_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let o = coldproxy(dir.path(), &["train-stage2"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("DependencyError"), "{err}");
    assert!(err.contains("train-stage1"), "{err}");
}

#[test]
fn unknown_variant_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = coldproxy(dir.path(), &["train-ranker", "--variant", "v9"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("InputError"));
}

#[test]
fn tiny_pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    for args in PIPELINE {
        ok(dir.path(), args);
    }
    assert!(start.elapsed().as_secs() < 60);
    let first = snapshot(dir.path());
    for args in PIPELINE {
        ok(dir.path(), args);
    }
    let second = snapshot(dir.path());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(second[k] == *v, "{} changed on re-run", k.display());
    }
}

#[test]
fn eval_prints_one_auc_line_per_split() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["gen-data"][..], &["train-stage1"], &["train-ranker", "--variant", "v3"]] {
        ok(dir.path(), args);
    }
    let stdout = ok(dir.path(), &["eval", "--variant", "v3", "--split", "cold", "--split", "warm"]);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("auc ")).collect();
    assert_eq!(lines.len(), 2, "{stdout}");
    for (line, split) in lines.iter().zip(["cold", "warm"]) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(parts[1], split);
        let v: f64 = parts[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn eval_rejects_ranker_trained_on_another_encoder() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["gen-data"][..], &["train-stage1"], &["train-ranker", "--variant", "v3"]] {
        ok(dir.path(), args);
    }
    let o = Command::new(env!("CARGO_BIN_EXE_coldproxy"))
        .args(["train-stage1", "--seed", "99", "--out"])
        .arg(dir.path())
        .arg("--config")
        .arg(tiny_config())
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = coldproxy(dir.path(), &["eval", "--variant", "v3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("HashMismatch"));
}

#[test]
fn ablation_writes_a_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["ablation", "--seeds", "3"]);
    let md = std::fs::read_to_string(dir.path().join("ablation/report.md")).unwrap();
    for v in ["base", "v1", "v2", "v3", "v4", "v5"] {
        assert!(md.lines().any(|l| l.starts_with(&format!("| {v} |"))), "{v} missing:\n{md}");
    }
}
