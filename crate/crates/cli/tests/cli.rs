use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
geometry.width = 32
geometry.height = 32
keypose.pca_dim = 8
keypose.k = 8
cvae.d_z = 8
cvae.channels = 4,8,8
cvae.cond_width = 8
cvae.dense_width = 32
cvae.lambda2 = 0.001
cvae.epochs = 2
cvae.learning_rate = 0.001
cvae.batch_size = 32
bilstm.hidden = 8
bilstm.epochs = 2
bilstm.learning_rate = 0.001
bilstm.batch_size = 32
geinet.epochs = 5
geinet.learning_rate = 0.001
";

fn gol(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gol"))
        .current_dir(cwd)
        .env_remove("GOL_CACHE")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = gol(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file under `dir` with its contents, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

#[test]
fn empty_argv_prints_usage_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = gol(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(text.contains("Usage"));
}

#[test]
fn unknown_command_is_status_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gol(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn synth_data_writes_sequences_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth-data", "--out", "d", "--subjects", "5", "--seqs", "4", "--frames", "12"],
    );
    let d = dir.path().join("d");
    let seq_dirs = fs::read_dir(&d).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(seq_dirs, 20);
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 20);
    let frames = fs::read_dir(d.join("s000_q00")).unwrap().count();
    assert!(frames >= 12);
}

#[test]
fn component_errors_are_one_line_with_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = gol(dir.path(), &["--models", "absent", "label", "--data", "nothing", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: checkpoint: "), "{err}");

    fs::write(dir.path().join("bad.cfg"), "cvae.d_z = many\n").unwrap();
    let out = gol(dir.path(), &["--config", "bad.cfg", "synth-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config: "));
}

fn train_tiny(cwd: &Path, models: &str) {
    for cmd in ["build-keyposes", "train-cvae", "train-bilstm", "train-geinet"] {
        ok(
            cwd,
            &["--config", "tiny.cfg", "--seed", "3", "--models", models, cmd, "--data", "data/gallery.txt"],
        );
    }
}

#[test]
fn end_to_end_smoke_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("tiny.cfg"), TINY).unwrap();
    let base = ["--config", "tiny.cfg", "--seed", "3"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(cwd, &args.iter().map(String::as_str).collect::<Vec<_>>());
    };

    run(&["synth-data", "--out", "data", "--subjects", "4", "--seqs", "3", "--frames", "30"]);
    let before = snapshot(&cwd.join("data"));
    train_tiny(cwd, "m");
    run(&["--models", "m", "occlude", "--data", "data/probes.txt", "--degree", "0.5", "--out", "occ"]);
    run(&["--models", "m", "reconstruct", "--data", "occ", "--ground-truth", "data/probes.txt", "--out", "rec"]);
    run(&["--models", "m", "evaluate", "--data", "occ", "--out", "ev"]);
    assert_eq!(snapshot(&cwd.join("data")), before, "inputs were modified");

    let summary = fs::read_to_string(cwd.join("ev/summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    let rank1: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=100.0).contains(&rank1));
    let preds = fs::read_to_string(cwd.join("ev/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("sequence_id,rank,label,probability"));
    for line in preds.lines().skip(1) {
        let rank: usize = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((1..=4).contains(&rank));
    }
    assert!(cwd.join("ev/cmc.png").is_file());
    let report = fs::read_to_string(cwd.join("rec/s000_q02/reconstruction.csv")).unwrap();
    assert_eq!(report.lines().count(), 31);

    // Same config and seed: byte-identical checkpoints and reports.
    train_tiny(cwd, "m2");
    assert_eq!(snapshot(&cwd.join("m")), snapshot(&cwd.join("m2")));
    run(&["--models", "m2", "evaluate", "--data", "occ", "--out", "ev2"]);
    run(&["--models", "m2", "evaluate", "--data", "occ", "--out", "ev3", "--jobs", "3"]);
    assert_eq!(snapshot(&cwd.join("ev")), snapshot(&cwd.join("ev2")));
    assert_eq!(snapshot(&cwd.join("ev")), snapshot(&cwd.join("ev3")));
}
