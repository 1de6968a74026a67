use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use inhibitor::checkpoint::load_checkpoint;
use inhibitor::cli::RunManifest;
use inhibitor::cost_model::CSV_HEADER;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inhibitor"))
        .args(args)
        .current_dir(dir)
        .env_remove("INHIBITOR_SEED")
        .output()
        .unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["--version"]), 0);
    assert_eq!(code(d, &[]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert_eq!(code(d, &["gradcheck", "--trials", "0"]), 2);
    assert_eq!(code(d, &["gradcheck", "--variant", "softmax"]), 2);
    assert_eq!(code(d, &["distill", "--phase", "layerwise", "--out", "x"]), 2);
    assert_eq!(code(d, &["bench", "--grid", "n=2,d=two", "--out", "b"]), 2);
    assert_eq!(code(d, &["init", "--config", "no-such-preset", "--out", "m"]), 2);
    fs::write(d.join("bad.cfg"), "[train]\nlearnig_rate = 1\n").unwrap();
    let out = run(d, &["init", "--config", "bad.cfg", "--out", "m"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["distill", "--phase", "full", "--teacher", "missing.ckpt", "--out", "x"]), 1);
    assert!(!d.join("x").exists());
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(d, &["eval", "--model", "junk.ckpt", "--data", "junk.ckpt"]), 1);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--trials", "1", "--variant", "inhibitor"]);
    assert!(out.contains("inhibitor_head"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn bench_reports_counts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["bench", "--grid", "n=2,d=2,dv=2", "--out", "a"]);
    let csv = fs::read_to_string(d.join("a/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let mults: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[5].to_string())
        })
        .collect();
    assert_eq!(mults, vec![("inhibitor".into(), "8".into()), ("dot_product".into(), "20".into())]);
    assert_eq!(code(d, &["bench", "--out", "a"]), 2);
    ok(d, &["bench", "--out", "b"]);
    ok(d, &["bench", "--out", "c"]);
    assert_eq!(fs::read(d.join("b/report.csv")).unwrap(), fs::read(d.join("c/report.csv")).unwrap());
}

#[test]
fn distillation_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["init", "--variant", "dot-product", "--seed", "7", "--out", "teacher"]);
    ok(d, &["gen-data", "--kind", "text", "--n", "24", "--out", "corpus.txt"]);
    for out in ["lw1", "lw2"] {
        ok(
            d,
            &["distill", "--phase", "layerwise", "--teacher", "teacher/model.ckpt", "--data", "corpus.txt", "--max-steps", "3", "--seed", "1", "--out", out],
        );
    }
    for f in ["model.ckpt", "losses.jsonl", "metrics.json"] {
        assert_eq!(fs::read(d.join("lw1").join(f)).unwrap(), fs::read(d.join("lw2").join(f)).unwrap(), "{f}");
    }
    ok(
        d,
        &["distill", "--phase", "full", "--teacher", "teacher/model.ckpt", "--student", "lw1/model.ckpt", "--data", "corpus.txt", "--max-steps", "3", "--out", "full"],
    );
    let teacher = RunManifest::read(&d.join("teacher")).unwrap();
    let lw = RunManifest::read(&d.join("lw1")).unwrap();
    let full = RunManifest::read(&d.join("full")).unwrap();
    assert_eq!(lw.parent_run_ids, vec![teacher.run_id.clone()]);
    assert_eq!(full.parent_run_ids, vec![teacher.run_id, lw.run_id]);
    let model = load_checkpoint(&d.join("full/model.ckpt")).unwrap();
    assert_eq!(model.run_id, Some(full.run_id));
    assert_eq!(model.state.variant(), inhibitor::attention::AttentionVariant::Inhibitor);

    let report = ok(d, &["report", "--run", "lw1"]);
    assert!(report.contains("layerwise"), "{report}");
    ok(d, &["eval", "--model", "full/model.ckpt", "--reference", "teacher/model.ckpt", "--metric", "mse", "--data", "corpus.txt", "--out", "ev"]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert!(metrics["value"].as_f64().unwrap() >= 0.0);
}

#[test]
fn finetune_then_task_distillation() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--kind", "planted", "--n", "60", "--seed", "3", "--out", "train.tsv"]);
    ok(d, &["gen-data", "--kind", "planted", "--n", "20", "--seed", "4", "--out", "held.tsv"]);
    ok(d, &["finetune", "--data", "train.tsv", "--heldout", "held.tsv", "--max-steps", "4", "--out", "ft"]);
    let acc = ok(d, &["eval", "--model", "ft/model.ckpt", "--data", "held.tsv"]);
    assert!(acc.starts_with("accuracy: "), "{acc}");
    ok(
        d,
        &["distill", "--phase", "task", "--config", "taskkd", "--teacher", "ft/model.ckpt", "--data", "train.tsv", "--max-steps", "2", "--out", "kd"],
    );
    let losses = fs::read_to_string(d.join("kd/losses.jsonl")).unwrap();
    assert!(losses.lines().count() >= 1);
    assert!(losses.contains("task_specific"));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let init = |seed: &str, out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_inhibitor"))
            .args(["init", "--out", out])
            .env("INHIBITOR_SEED", seed)
            .current_dir(d)
            .status()
            .unwrap();
        assert!(status.success());
        load_checkpoint(&d.join(out).join("model.ckpt")).unwrap()
    };
    let a = init("5", "a");
    let b = init("5", "b");
    let c = init("6", "c");
    assert!(a.state.bitwise_eq(&b.state));
    assert!(!a.state.bitwise_eq(&c.state));
    assert_eq!(RunManifest::read(&d.join("a")).unwrap().seed, 5);
}
