use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stvad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("STVAD_SEED")
        .output()
        .expect("spawn stvad")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(stvad(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = stvad(&["synth", "--out", s(dir.path()), "--set", "alpha_x=0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpha_x"), "{}", stderr(&out));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nalpha_x = 1\n").unwrap();
    let out = stvad(&["synth", "--out", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpha_x"));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let out = stvad(&["train", "--data", s(&nowhere), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"));
    let out = stvad(&["eval", "--checkpoint", s(&nowhere.join("c.bin")), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stvad(&["synth"]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("c.bin");
    fs::write(&ck, b"garbage").unwrap();
    let out = stvad(&["score", "--checkpoint", s(&ck), "--frames", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn synth_train_eval_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "height = 16\nwidth = 16\nlevels = 2\nchannels = 4,8\nclip_len = 3\nmemory_items = 4\nreduction_ratio = 2\nepochs = 1\n",
    )
    .unwrap();

    let out = stvad(&["synth", "--out", s(&data), "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(data.join("test_labels").is_dir());

    let out = stvad(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--batch-size", "16"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let echoed = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("seed = 0"), "{echoed}");
    assert!(echoed.contains("batch_size = 16"));

    let ck = run.join("checkpoint.bin");
    let eval = dir.path().join("eval");
    let out = stvad(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&eval), "--lambda", "0.5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = fs::read_to_string(eval.join("report.txt")).unwrap();
    assert!(report.contains("lambda=0.5"), "{report}");
    assert!(report.lines().any(|l| l.starts_with("frame_auc=")));

    let video = data.join("test").join("00");
    let out = stvad(&["score", "--checkpoint", s(&ck), "--frames", s(&video)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let frames = fs::read_dir(&video).unwrap().count();
    assert_eq!(csv.lines().count(), frames + 1);
    assert!(csv.starts_with("frame,psnr,d_spatial,d_temporal,score,label"));

    let out = stvad(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&eval), "--set", "levels=3"]);
    assert_eq!(out.status.code(), Some(2));
}
