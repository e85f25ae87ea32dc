use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sadi_core::metrics::TABLE_COLUMNS;

fn sadi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sadi"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SADI_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_small(dir: &Path, out: &str) -> Output {
    sadi(&["train", "--synthetic", "8", "--epochs", "1", "--out", out], dir)
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&sadi(&["--help"], d)), 0);
    assert_eq!(code(&sadi(&["train", "--bogus"], d)), 1);
    assert_eq!(
        code(&sadi(
            &["train", "--set", "no_such_key=1", "--dry-run", "--out", "x"],
            d
        )),
        1
    );
    assert_eq!(
        code(&sadi(&["train", "--set", "sigma_px=0", "--dry-run", "--out", "x"], d)),
        1
    );
    assert_eq!(code(&sadi(&["ablate", "--recipe", "nope"], d)), 1);

    let clean = sadi(&["gradcheck", "--scope", "softplus"], d);
    assert_eq!(code(&clean), 0, "{}", stdout(&clean));
    let faulty = sadi(&["gradcheck", "--scope", "softplus", "--fault", "softplus"], d);
    assert_eq!(code(&faulty), 2);
    assert!(stdout(&faulty).contains("FAIL softplus"));
}

#[test]
fn synth_writes_images_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadi(
        &[
            "synth",
            "--n",
            "6",
            "--joints",
            "16",
            "--image-size",
            "32",
            "--out",
            "s",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let s = dir.path().join("s");
    let pngs = fs::read_dir(&s)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 6);
    let report = sadi_core::data::load_annotations(s.join("annotations.json")).unwrap();
    assert_eq!(report.records.len(), 6);
    assert!(report.records.iter().all(|r| r.num_joints() == 16));
}

#[test]
fn dry_run_writes_only_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&sadi(
            &["train", "--dry-run", "--epochs", "5", "--out", "r"],
            dir.path()
        )),
        0
    );
    let r = dir.path().join("r");
    assert!(r.join("lr_log.csv").exists());
    assert!(!r.join("model.ckpt").exists());
}

#[test]
fn train_then_eval_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = train_small(d, "run");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "loss_log.csv", "lr_log.csv", "metrics.csv", "model.ckpt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    assert_eq!(
        code(&sadi(&["synth", "--n", "10", "--joints", "4", "--out", "gt"], d)),
        0
    );
    let o = sadi(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--annotations",
            "gt/annotations.json",
            "--ground-truth",
            "--metric",
            "pckh0.5",
            "--csv",
            "t.csv",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    let header: Vec<String> = stdout(&o)
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .map(String::from)
        .collect();
    assert_eq!(header, TABLE_COLUMNS);

    let csv = fs::read_to_string(d.join("t.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,threshold,column,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let columns: Vec<&str> = rows.iter().take(TABLE_COLUMNS.len()).map(|r| r[2]).collect();
    assert_eq!(columns, TABLE_COLUMNS);
    let mean = rows.iter().find(|r| r[2] == "Mean").unwrap();
    assert_eq!(mean[3], "100");

    let o = sadi(&["inspect", "--checkpoint", "run/model.ckpt"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("parameters"));
}

#[test]
fn eval_rejects_a_joint_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&train_small(d, "run")), 0);
    assert_eq!(
        code(&sadi(&["synth", "--n", "3", "--joints", "16", "--out", "gt"], d)),
        0
    );
    let o = sadi(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--annotations",
            "gt/annotations.json",
        ],
        d,
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("joints"));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&train_small(d, "a")), 0);
    assert_eq!(code(&train_small(d, "b")), 0);
    for f in ["loss_log.csv", "lr_log.csv", "metrics.csv", "model.ckpt"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str, flag: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_sadi"))
            .args(["train", "--dry-run", "--epochs", "1", "--out", out])
            .args(flag)
            .current_dir(dir.path())
            .env("SADI_SEED", seed)
            .output()
            .unwrap()
    };
    let seed_in = |out: &str| {
        let text = fs::read_to_string(dir.path().join(out).join("config.txt")).unwrap();
        text.lines()
            .find_map(|l| l.strip_prefix("seed = ").map(String::from))
            .unwrap()
    };
    assert_eq!(code(&run("41", "a", &[])), 0);
    assert_eq!(seed_in("a"), "41");
    assert_eq!(code(&run("41", "b", &["--seed", "3"])), 0);
    assert_eq!(seed_in("b"), "3", "flags win over the environment");
    assert_eq!(code(&run("x", "c", &[])), 1);
}
