use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semcenter(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcenter"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn semcenter")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_RUN: &str = "\
train_manifest=data/train/manifest.txt
val_manifest=data/test/manifest.txt
phase1_epochs=2
phase2_epochs=2
phase3_epochs=1
freeze_warmup_epochs=1
batch_size=16
n_quant=6
q=2
lr_phase1=1e-3
lr_phase23=1e-4
lr_warmup=0.1
center_lr=0.05
word_dim=8
embed_dim=8
";

/// Writes a small synthetic train/test pair and a short training config.
fn small_setup(dir: &Path) {
    ok(&semcenter(
        dir,
        &[
            "synth",
            "--n-concepts",
            "6",
            "--subsets-per-concept",
            "6",
            "--feat-dim",
            "12",
            "--vocab-size",
            "60",
            "--test-per-concept",
            "2",
            "--out",
            "data",
        ],
    ));
    fs::write(dir.join("run.cfg"), SMALL_RUN).unwrap();
}

#[test]
fn missing_config_exits_1_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = semcenter(dir.path(), &["train", "--config", "does_not_exist.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does_not_exist.cfg"));
}

#[test]
fn missing_manifest_exits_1_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "train_manifest=nowhere/manifest.txt\n").unwrap();
    let out = semcenter(dir.path(), &["train", "--config", "run.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/manifest.txt"));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "learning_rate=0.1\n").unwrap();
    let out = semcenter(dir.path(), &["train", "--config", "run.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_writes_phase_checkpoints_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    let out = semcenter(d, &["train", "--config", "run.cfg", "--out", "run"]);
    ok(&out);
    for f in ["phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "metrics.csv", "config.txt", "report.csv"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("annotation") && stdout.contains("search"), "{stdout}");
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,phase,epoch,"));
}

#[test]
fn set_flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    ok(&semcenter(
        d,
        &["train", "--config", "run.cfg", "--out", "run", "--seed", "7", "--set", "n_quant=4"],
    ));
    let saved = fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(saved.lines().any(|l| l == "n_quant=4"), "{saved}");
    assert!(saved.lines().any(|l| l == "seed=7"), "{saved}");
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    fs::write(d.join("hard.cfg"), format!("{SMALL_RUN}sampling=hardest\n")).unwrap();
    ok(&semcenter(d, &["train", "--config", "hard.cfg", "--seed", "3", "--out", "a"]));
    ok(&semcenter(d, &["train", "--config", "hard.cfg", "--seed", "3", "--out", "b"]));
    for f in ["phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "metrics.csv"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn eval_reports_every_requested_k() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    ok(&semcenter(d, &["train", "--config", "run.cfg", "--out", "run"]));
    let out = semcenter(
        d,
        &[
            "eval",
            "--ckpt",
            "run/phase3.ckpt",
            "--manifest",
            "data/test/manifest.txt",
            "--ks",
            "1,5,10",
            "--out",
            "ev",
        ],
    );
    ok(&out);
    let csv = fs::read_to_string(d.join("ev/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "{csv}");
    for dir in ["annotation", "search"] {
        let ks: Vec<&str> = rows
            .iter()
            .filter(|r| r.starts_with(dir))
            .map(|r| r.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(ks, ["1", "5", "10"]);
    }
    for r in rows {
        let v: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn eval_dimension_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    ok(&semcenter(d, &["train", "--config", "run.cfg", "--out", "run"]));
    ok(&semcenter(
        d,
        &["synth", "--n-concepts", "3", "--subsets-per-concept", "2", "--feat-dim", "5", "--out", "other"],
    ));
    let out = semcenter(d, &["eval", "--ckpt", "run/phase1.ckpt", "--manifest", "other/manifest.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mismatch") && err.contains("other/manifest.txt"), "{err}");
}

#[test]
fn eval_corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = semcenter(d, &["eval", "--ckpt", "junk.ckpt", "--manifest", "data/test/manifest.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.ckpt"));
}

#[test]
fn gradcheck_passes_and_corruption_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = semcenter(dir.path(), &["gradcheck", "--seed", "4"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("passed"));

    let out = semcenter(dir.path(), &["gradcheck", "--phase", "2", "--corrupt-grad"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_default_size_and_byte_identical_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&semcenter(d, &["synth", "--seed", "0", "--out", "a"]));
    ok(&semcenter(d, &["synth", "--seed", "0", "--out", "b"]));
    for f in ["features.jef", "captions.tsv", "vocab.txt", "labels.txt", "manifest.txt"] {
        assert!(fs::read(d.join("a").join(f)).unwrap() == fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let labels = fs::read_to_string(d.join("a/labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 1000);
    let captions = fs::read_to_string(d.join("a/captions.tsv")).unwrap();
    assert_eq!(captions.lines().count(), 5000);

    ok(&semcenter(d, &["synth", "--seed", "1", "--out", "c"]));
    assert_ne!(fs::read(d.join("a/features.jef")).unwrap(), fs::read(d.join("c/features.jef")).unwrap());
}

#[test]
fn synth_rejects_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = semcenter(dir.path(), &["synth", "--k", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn kmeans_init_writes_quantized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_setup(d);
    ok(&semcenter(d, &["train", "--config", "run.cfg", "--out", "run", "--set", "phase2_epochs=0", "--set", "phase3_epochs=0"]));
    assert!(!d.join("run/phase2.ckpt").exists());
    let out = semcenter(d, &["kmeans-init", "--ckpt", "run/phase1.ckpt", "--out", "km"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("objective"));
    assert!(d.join("km/kmeans.ckpt").is_file());

    // a quantized bank cannot be clustered again
    let out = semcenter(d, &["kmeans-init", "--ckpt", "km/kmeans.ckpt", "--out", "km2"]);
    assert_eq!(out.status.code(), Some(1));
}
