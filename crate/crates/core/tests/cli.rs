//! End-to-end runs of the `vidstory` binary.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "seed = 2
word_dim = 8
hidden = 8
min_sentences = 6
learning_rate = 0.01
local_epochs = 15
global_epochs = 15
narrator_epochs = 3
baseline_rollouts = 2
episodes = 2
epsilon = 0.0

[synth]
num_videos = 14
";

fn vidstory(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidstory"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
}

fn synth_and_local(root: &Path, run: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let data = root.join("data");
    if !data.exists() {
        assert_ok(&vidstory(&["synth", "--out-dir", s(&data), "--config", s(&cfg)]));
    }
    let run = root.join(run);
    assert_ok(&vidstory(&[
        "train-local",
        "--data",
        s(&data),
        "--out-dir",
        s(&run),
        "--config",
        s(&cfg),
    ]));
    (cfg, data, run)
}

#[test]
fn full_pipeline_and_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let (cfg, data, run) = synth_and_local(root.path(), "run");
    assert_ok(&vidstory(&["train-global", "--out-dir", s(&run)]));
    assert_ok(&vidstory(&["train-narrator", "--out-dir", s(&run), "--mode", "iou"]));
    for f in [
        "manifest.json",
        "local_curve.csv",
        "global_curve.csv",
        "reward_curve.csv",
        "narrator.ckpt.json",
        "idf.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let id = manifest["split"]["train"][0].as_str().unwrap().to_owned();
    let told = vidstory(&["tell", "--out-dir", s(&run), "--video", &id]);
    assert_ok(&told);
    let story_file = run.join("stories").join(format!("{id}.jsonl"));
    let lines = std::fs::read_to_string(&story_file).unwrap();
    assert!(lines.lines().count() >= 1);

    let metrics = root.path().join("metrics");
    assert_ok(&vidstory(&[
        "evaluate",
        "--stories",
        s(&run.join("stories")),
        "--data",
        s(&data),
        "--out-dir",
        s(&metrics),
        "--config",
        s(&cfg),
    ]));
    let csv = std::fs::read_to_string(metrics.join("metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("cider"));
    assert!(csv.lines().any(|l| l.starts_with("mean,")));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(metrics.join("metrics.json")).unwrap()).unwrap();
    assert!(json["mean"]["bleu1"].as_f64().unwrap() > 0.0);

    // nothing clears a near-one threshold: an empty story is a warning
    let empty = vidstory(&["tell", "--out-dir", s(&run), "--video", &id, "--epsilon", "0.99"]);
    assert_eq!(empty.status.code(), Some(2), "stderr: {}", stderr(&empty));
    assert!(stderr(&empty).contains("warning"));

    let unknown = vidstory(&["tell", "--out-dir", s(&run), "--video", "no-such-video"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn phases_must_run_in_order() {
    let root = tempfile::tempdir().unwrap();
    let o = vidstory(&["train-global", "--out-dir", s(root.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-local"), "{}", stderr(&o));

    let (_, _, run) = synth_and_local(root.path(), "run");
    let o = vidstory(&["train-narrator", "--out-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("global"), "{}", stderr(&o));
}

#[test]
fn modified_checkpoint_is_refused() {
    let root = tempfile::tempdir().unwrap();
    let (_, _, run) = synth_and_local(root.path(), "run");
    let ckpt = run.join("local.ckpt.json");
    let mut text = std::fs::read_to_string(&ckpt).unwrap();
    text.push('\n');
    std::fs::write(&ckpt, text).unwrap();
    let o = vidstory(&["train-global", "--out-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint changed"), "{}", stderr(&o));
}

#[test]
fn reruns_are_bitwise_identical() {
    let root = tempfile::tempdir().unwrap();
    let (_, _, a) = synth_and_local(root.path(), "a");
    let (_, _, b) = synth_and_local(root.path(), "b");
    for f in ["local.ckpt.json", "local_curve.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let o = vidstory(&["synth", "--out-dir", s(&root.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn gradcheck_command_reports_rows() {
    let o = vidstory(&["gradcheck", "--instances", "2", "--seed", "4"]);
    assert_ok(&o);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("clip_sentence") && out.contains("video_story"), "{out}");
}

#[test]
fn bad_arguments_exit_with_error() {
    assert_eq!(vidstory(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vidstory(&["--help"]).status.code(), Some(0));
}
