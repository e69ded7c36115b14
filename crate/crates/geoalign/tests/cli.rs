//! Command-line interface contract: flags, exit codes, file outputs.

use std::path::Path;
use std::process::Command;

fn geoalign() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geoalign"))
}

fn run_in(dir: &Path, args: &[&str]) -> std::process::Output {
    geoalign()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn help_lists_every_subcommand_and_defaults() {
    let out = geoalign().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "synth", "filter", "hardneg", "leakcheck", "train", "eval", "gradcheck", "heatmap",
    ] {
        assert!(text.contains(cmd), "--help must mention {cmd}");
    }

    // Per-subcommand help shows flags with defaults.
    let out = geoalign().args(["synth", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--split-ratio"));
    assert!(text.contains("default: 0.8"));
    let out = geoalign().args(["train", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--preset") && text.contains("default: toy"));
}

#[test]
fn unknown_flags_are_errors() {
    let out = geoalign()
        .args(["synth", "--n", "1", "--out", "/tmp/x", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frobnicate"));
}

#[test]
fn missing_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["filter", "--in", "nope.jsonl", "--out", "o.jsonl", "--report", "r.json"],
    );
    assert_eq!(out.status.code(), Some(1));

    let out = run_in(
        dir.path(),
        &["eval", "--ckpt", "missing.ckpt", "--data", "nope.jsonl", "--out", "e.json"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_writes_the_documented_layout_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--n", "10", "--seed", "5", "--out", "corpus"];
    assert!(run_in(dir.path(), &args).status.success());
    let jsonl = dir.path().join("corpus/dataset.jsonl");
    let text = std::fs::read_to_string(&jsonl).unwrap();
    assert_eq!(text.lines().count(), 10);
    let images: Vec<_> = std::fs::read_dir(dir.path().join("corpus/images"))
        .unwrap()
        .collect();
    assert_eq!(images.len(), 10);

    // Identical seeds reproduce byte-identical outputs.
    let args2 = ["synth", "--n", "10", "--seed", "5", "--out", "corpus2"];
    assert!(run_in(dir.path(), &args2).status.success());
    let text2 = std::fs::read_to_string(dir.path().join("corpus2/dataset.jsonl")).unwrap();
    assert_eq!(text2.replace("corpus2", "corpus"), text.replace("corpus2", "corpus"));
}

#[test]
fn stage2_without_init_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), &["synth", "--n", "8", "--seed", "1", "--out", "c"])
        .status
        .success());
    let out = run_in(
        dir.path(),
        &[
            "train", "--stage", "2", "--data", "c/dataset.jsonl", "--out", "x.ckpt",
            "--epochs", "1", "--batch-size", "4", "--warmup", "0",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage2 requires"));
}

#[test]
fn gradcheck_command_passes_and_honors_loss_selection() {
    let out = geoalign()
        .args(["gradcheck", "--losses", "vic,global", "--trials", "3", "--seed", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("vic") && text.contains("global"));
    assert!(!text.contains("hna"));

    let out = geoalign()
        .args(["gradcheck", "--losses", "bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_feeds_defaults_and_cli_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), &["synth", "--n", "12", "--seed", "3", "--out", "c"])
        .status
        .success());
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{ "train": { "epochs": 1, "batch_size": 6, "warmup_iters": 0, "lr": 0.001 } }"#,
    )
    .unwrap();
    // Config file sets batch 6 over the 10 train records -> 2 steps/epoch.
    let out = run_in(
        dir.path(),
        &[
            "train", "--stage", "1", "--config", "cfg.json", "--data", "c/dataset.jsonl",
            "--out", "a.ckpt", "--seed", "3",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("a.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    // The CLI flag overrides the file's batch size: one step covers all
    // 10 train records.
    let out = run_in(
        dir.path(),
        &[
            "train", "--stage", "1", "--config", "cfg.json", "--data", "c/dataset.jsonl",
            "--out", "b.ckpt", "--seed", "3", "--batch-size", "16",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("b.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    // Unknown config keys are rejected.
    std::fs::write(dir.path().join("bad.json"), r#"{ "trian": {} }"#).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--stage", "1", "--config", "bad.json", "--data", "c/dataset.jsonl",
            "--out", "c.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn leakcheck_exits_nonzero_on_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), &["synth", "--n", "6", "--seed", "9", "--out", "c"])
        .status
        .success());
    // A dataset whose test split duplicates a train image: copy a train
    // record, retag it as test.
    let text = std::fs::read_to_string(dir.path().join("c/dataset.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let train_line = lines.iter().find(|l| l.contains("\"train\"")).unwrap().clone();
    let dup = train_line
        .replace("\"split\":\"train\"", "\"split\":\"test\"")
        .replacen("\"id\":\"scene_", "\"id\":\"dup_scene_", 1);
    lines.push(dup);
    std::fs::write(dir.path().join("c/leaky.jsonl"), lines.join("\n") + "\n").unwrap();

    let out = run_in(
        dir.path(),
        &[
            "leakcheck", "--train", "c/leaky.jsonl", "--test", "c/leaky.jsonl",
            "--report", "c/leak.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/leak.json")).unwrap())
            .unwrap();
    assert_eq!(report["exact_duplicate_pairs"].as_array().unwrap().len(), 1);
}
