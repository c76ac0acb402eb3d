use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vulndiv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("one JSON line on stdout")
}

fn err_line(args: &[&str]) -> (i32, Value) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let text = String::from_utf8(out.stderr).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "stderr is not one line: {text}");
    (out.status.code().unwrap(), serde_json::from_str(text.trim_end()).expect("stderr line is JSON"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every regular file under `dir`, relative, with contents.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    surrogate: PathBuf,
}

impl Fixture {
    fn test_images(&self) -> PathBuf {
        self.data.join("test-images.idx")
    }

    fn test_labels(&self) -> PathBuf {
        self.data.join("test-labels.idx")
    }
}

/// A small dataset, a 3-member DVERGE run and a baseline surrogate, shared
/// by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        ok(&["gen-data", "--out", s(&data), "--classes", "4", "--size", "8", "--train-per-class", "16", "--test-per-class", "8"]);
        let cfg = root.path().join("train.json");
        fs::write(
            &cfg,
            r#"{"plan": {"mode": "dverge", "models": 3, "epochs": 2, "pretrain_epochs": 2, "batch_size": 16,
                "distill": {"epsilon": 0.1, "layer": 1, "steps": 3}}}"#,
        )
        .unwrap();
        let idx = |k: &str| s(&data.join(k)).to_string();
        let run_dir = root.path().join("run");
        ok(&[
            "train", "--config", s(&cfg), "--out", s(&run_dir), "--workers", "1",
            "--train-images", &idx("train-images.idx"), "--train-labels", &idx("train-labels.idx"),
            "--eval-images", &idx("test-images.idx"), "--eval-labels", &idx("test-labels.idx"),
        ]);
        let surrogate = root.path().join("surrogate");
        ok(&[
            "train", "--out", s(&surrogate), "--mode", "baseline", "--models", "1", "--epochs", "3", "--seed", "9",
            "--train-images", &idx("train-images.idx"), "--train-labels", &idx("train-labels.idx"),
        ]);
        Fixture {
            data,
            run: run_dir,
            surrogate,
            _root: root,
        }
    })
}

#[test]
fn train_layout_has_checkpoints_index_and_log() {
    let f = fixture();
    let ckpt = f.run.join("checkpoint");
    assert!(ckpt.join("ensemble.json").is_file());
    for i in 0..3 {
        assert!(ckpt.join(format!("member-{i}/manifest.json")).is_file());
        assert!(ckpt.join(format!("member-{i}/weights.bin")).is_file());
    }
    assert!(!ckpt.join("member-3").exists());
    let log = fs::read_to_string(f.run.join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[0]["phase"], "pretrain");
    assert_eq!(records[3]["mode"], "dverge");
    assert!(f.run.join("config.resolved.json").is_file());
}

#[test]
fn provenance_lists_every_artifact_with_its_digest() {
    let f = fixture();
    let p: Value = serde_json::from_str(&fs::read_to_string(f.run.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(p["command"], "train");
    assert_eq!(p["version"], env!("CARGO_PKG_VERSION"));
    assert!(p["seed"].is_u64());
    let artifacts = p["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 1 + 1 + 3 * 2);
    for a in artifacts {
        let path = f.run.join(a["path"].as_str().unwrap());
        let digest = sha256_hex(&fs::read(path).unwrap());
        assert_eq!(a["sha256"], digest);
    }
    let cfg = fs::read(f.run.join("config.resolved.json")).unwrap();
    assert_eq!(p["config_sha256"], sha256_hex(&cfg));
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Runs `args` into `a`, then reruns from `a`'s resolved config into `b`
/// single-threaded, and requires byte-identical output trees.
fn assert_rerun_identical(args: &[&str], root: &Path) {
    let (a, b) = (root.join("a"), root.join("b"));
    let mut first: Vec<&str> = args.to_vec();
    first.extend(["--out", s(&a), "--workers", "1"]);
    ok(&first);
    let cfg = a.join("config.resolved.json");
    ok(&[args[0], "--config", s(&cfg), "--out", s(&b), "--workers", "1"]);
    assert_eq!(snapshot(&a), snapshot(&b), "{} rerun differs", args[0]);
}

#[test]
fn every_command_reruns_bitwise_from_its_resolved_config() {
    let f = fixture();
    let ck = f.run.join("checkpoint");
    let sur = f.surrogate.join("checkpoint");
    let (img, lbl) = (f.test_images(), f.test_labels());
    let data = ["--images", s(&img), "--labels", s(&lbl)];
    let cases: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--classes", "3", "--size", "8", "--train-per-class", "4", "--test-per-class", "2"],
        vec![
            "train", "--mode", "dverge", "--models", "2", "--epochs", "1", "--set", "plan.batch_size=16",
            "--set", r#"plan.distill={"epsilon":0.1,"layer":2,"steps":2}"#,
            "--train-images", s(&img), "--train-labels", s(&lbl),
        ],
        [&["distill", "--checkpoint", s(&ck), "--epsilon", "0.1", "--layer", "2", "--count", "5"][..], &data].concat(),
        [&["diversity", "--checkpoint", s(&ck), "--epsilon", "0.1", "--samples", "8", "--set", "distill.layer=1"][..], &data].concat(),
        [&["transfer-matrix", "--checkpoint", s(&ck), "--epsilon", "0.15", "--samples", "10", "--set", "attack.steps=5"][..], &data].concat(),
        [
            &["attack-eval", "--checkpoint", s(&ck), "--surrogate", s(&sur), "--eps", "0,0.1",
              "--samples", "12", "--set", "whitebox.steps=4", "--set", "whitebox.restarts=2"][..],
            &data,
        ]
        .concat(),
        [&["decision-region", "--checkpoint", s(&ck), "--surrogate", s(&sur), "--epsilon", "0.2", "--resolution", "5"][..], &data].concat(),
        [&["sweep-eps", "--checkpoint", s(&ck), "--eps", "0,0.05,0.1", "--samples", "12", "--set", "attack.steps=4"][..], &data].concat(),
        [&["convergence-check", "--checkpoint", s(&ck), "--epsilon", "0.1", "--iterations", "5,20", "--samples", "12"][..], &data].concat(),
    ];
    for args in cases {
        let root = tempfile::tempdir().unwrap();
        assert_rerun_identical(&args, root.path());
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let f = fixture();
    let ck = f.run.join("checkpoint");
    let root = tempfile::tempdir().unwrap();
    let (img, lbl) = (f.test_images(), f.test_labels());
    let mut trees = Vec::new();
    for w in ["1", "3"] {
        let out = root.path().join(w);
        ok(&["transfer-matrix", "--checkpoint", s(&ck), "--epsilon", "0.15", "--samples", "20", "--set", "attack.steps=5",
             "--images", s(&img), "--labels", s(&lbl), "--out", s(&out), "--workers", w]);
        trees.push(snapshot(&out));
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn sweep_zero_row_is_clean_accuracy() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("sweep");
    ok(&["sweep-eps", "--checkpoint", s(&f.run.join("checkpoint")), "--eps", "0,0.1,0.2", "--set", "attack.steps=5",
         "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--out", s(&out)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows[0]["epsilon"], 0.0);
    assert_eq!(rows[0]["whitebox_accuracy"], v["clean_accuracy"]);
    let acc: Vec<f64> = rows.iter().map(|r| r["whitebox_accuracy"].as_f64().unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[1] <= w[0]), "{acc:?}");
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with('#'));
}

#[test]
fn transfer_matrix_writes_csv_and_sidecar() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("tm");
    ok(&["transfer-matrix", "--checkpoint", s(&f.run.join("checkpoint")), "--epsilon", "0.15", "--samples", "10",
         "--set", "attack.steps=5", "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("transfer_matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# epsilon=0.15"));
    assert_eq!(lines[1], "source,on_0,on_1,on_2");
    assert_eq!(lines.len(), 5);
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("transfer_matrix.json")).unwrap()).unwrap();
    assert_eq!(meta["rates"].as_array().unwrap().len(), 3);
}

#[test]
fn distill_emits_a_readable_idx_batch() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("d");
    ok(&["distill", "--checkpoint", s(&f.run.join("checkpoint")), "--epsilon", "0.05", "--layer", "1", "--count", "6",
         "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--out", s(&out)]);
    let d = vulndiv::data::load_idx(out.join("distilled-images.idx"), out.join("distilled-labels.idx")).unwrap();
    assert_eq!(d.len(), 6);
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("distilled.json")).unwrap()).unwrap();
    assert_eq!(meta["objective"].as_array().unwrap().len(), 6);
}

#[test]
fn flags_override_config_and_set_overrides() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("c.json");
    fs::write(&cfg, r#"{"epsilon": 0.3, "samples": 4, "attack": {"epsilon": 0.1, "steps": 3, "step_size": 0.02}}"#).unwrap();
    let out = root.path().join("o");
    ok(&["transfer-matrix", "--config", s(&cfg), "--set", "samples=5", "--epsilon", "0.05",
         "--checkpoint", s(&f.run.join("checkpoint")), "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--out", s(&out)]);
    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["epsilon"], 0.05);
    assert_eq!(resolved["samples"], 5);
    assert_eq!(resolved["attack"]["steps"], 3);
    assert_eq!(resolved["attack"]["momentum"], 0.0);
}

#[test]
fn errors_are_single_json_lines() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("x");

    let (code, e) = err_line(&["train", "--out", s(&out), "--no-such-flag"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"], "usage");

    let (code, e) = err_line(&["frobnicate"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"], "usage");

    let (code, e) = err_line(&["transfer-matrix", "--out", s(&out), "--checkpoint", s(&root.path().join("missing")),
                               "--epsilon", "0.1", "--images", s(&f.test_images()), "--labels", s(&f.test_labels())]);
    assert_eq!(code, 1);
    assert_eq!(e["error"], "checkpoint");

    let (_, e) = err_line(&["sweep-eps", "--out", s(&out), "--checkpoint", s(&f.run.join("checkpoint")), "--eps", "0.1",
                            "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--set", "attack.momentum=\"high\""]);
    assert_eq!(e["error"], "config");
    assert_eq!(e["path"], "attack.momentum");

    let (_, e) = err_line(&["sweep-eps", "--out", s(&out), "--checkpoint", s(&f.run.join("checkpoint")), "--eps", "0.1",
                            "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--set", "precision=f64"]);
    assert_eq!(e["path"], "precision");

    let (_, e) = err_line(&["sweep-eps", "--out", s(&out), "--checkpoint", s(&f.run.join("checkpoint")), "--eps", "0.1",
                            "--images", s(&f.test_images()), "--labels", s(&f.test_labels()), "--set", "unknown_key=1"]);
    assert_eq!(e["error"], "config");

    let cfg = root.path().join("bad.json");
    fs::write(&cfg, r#"{"plan": {"mode": "dverge", "models": 3, "epochs": 1}}"#).unwrap();
    let (_, e) = err_line(&["train", "--config", s(&cfg), "--out", s(&out), "--train-images", s(&f.test_images()), "--train-labels", s(&f.test_labels())]);
    assert_eq!(e["error"], "config");
    assert_eq!(e["path"], "distill");
}

#[test]
fn help_mentions_precedence() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("precedence"));
    for cmd in ["gen-data", "train", "distill", "diversity", "transfer-matrix", "attack-eval", "decision-region", "sweep-eps", "convergence-check"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
