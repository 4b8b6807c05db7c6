use std::path::Path;
use std::process::{Command, Output};

fn covt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covt")).args(args).env("COVT_THREADS", "1").output().expect("run covt")
}

fn ok(args: &[&str]) -> String {
    let out = covt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn micro_train(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--variant", "micro", "--batch-size", "8", "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn exit_codes() {
    assert_eq!(covt(&["--help"]).status.code(), Some(0));
    assert_eq!(covt(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(covt(&["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(covt(&["inspect", "--variant", "covt-xl"]).status.code(), Some(1));
    assert_eq!(covt(&["eval", "--checkpoint", "/nonexistent/ck.bin"]).status.code(), Some(2));
    assert_eq!(covt(&["gradcheck", "--op", "no-such-op"]).status.code(), Some(1));
    let bad_threads =
        Command::new(env!("CARGO_BIN_EXE_covt")).args(["inspect"]).env("COVT_THREADS", "x").output().unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}

#[test]
fn train_writes_run_directory_and_eval_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let stdout = micro_train(&run, &["--epochs", "2", "--seed", "3"]);
    assert_eq!(stdout.lines().count(), 2);
    for f in ["metrics.jsonl", "timing.jsonl", "config.toml", "checkpoint.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("seed = 3") && config.contains("epochs = 2"), "{config}");

    let ck = run.join("checkpoint.bin");
    let evals: Vec<String> = (0..3).map(|_| ok(&["eval", "--checkpoint", s(&ck), "--json"])).collect();
    assert!(evals.iter().all(|e| e == &evals[0]));
    let report: serde_json::Value = serde_json::from_str(&evals[0]).unwrap();
    assert_eq!(report["count"], 32);
    assert!(report["top1"].as_f64().unwrap() <= report["top5"].as_f64().unwrap());
}

#[test]
fn seeds_change_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = micro_train(&dir.path().join("a"), &["--epochs", "1", "--seed", "1"]);
    let b = micro_train(&dir.path().join("b"), &["--epochs", "1", "--seed", "2"]);
    assert_ne!(a, b);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    micro_train(&full, &["--epochs", "3", "--checkpoint-every", "1"]);
    let first = full.join("checkpoint-epoch0001.bin");
    micro_train(&part, &["--epochs", "3", "--resume", s(&first)]);
    let tail: Vec<String> =
        std::fs::read_to_string(full.join("metrics.jsonl")).unwrap().lines().skip(1).map(String::from).collect();
    let resumed: Vec<String> =
        std::fs::read_to_string(part.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(resumed, tail);
    assert_eq!(
        std::fs::read(full.join("checkpoint.bin")).unwrap(),
        std::fs::read(part.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\nepochs = 4\nbatch_size = 8\n[model]\nvariant = \"micro\"\n").unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&out)]);
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 5") && resolved.contains("epochs = 1"), "{resolved}");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 3\n").unwrap();
    assert_eq!(covt(&["train", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn synth_then_train_and_eval_on_folders() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--n-per-class", "4", "--classes", "3"]);
    let classes: Vec<_> = std::fs::read_dir(&data).unwrap().collect();
    assert_eq!(classes.len(), 3);

    let out = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "batch_size = 4\n[model]\nvariant = \"micro\"\nnum_classes = 3\n").unwrap();
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--data", s(&data), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--data",
        s(&data),
        "--json",
    ]))
    .unwrap();
    assert_eq!(report["count"], 12);
    assert_eq!(report["confusion"].as_array().unwrap().len(), 3);

    // Two-class model against a three-class folder.
    let wrong =
        covt(&["train", "--variant", "micro", "--epochs", "1", "--data", s(&data), "--out", s(&dir.path().join("x"))]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn gradcheck_filter_and_inspect_table() {
    let out: serde_json::Value = serde_json::from_str(&ok(&["gradcheck", "--op", "softmax", "--json"])).unwrap();
    let reports = out.as_array().unwrap();
    assert!(!reports.is_empty() && reports.iter().all(|r| r["passed"] == true));

    let table = ok(&["inspect", "--variant", "micro", "--stem-stride", "1", "--probe"]);
    for field in ["9x9", "11x11", "13x13", "15x15"] {
        assert!(table.contains(field), "{table}");
    }
}
