use std::path::Path;
use std::process::{Command, Output};

fn featslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featslam")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a feature-file scene and returns its run config path.
fn synth_loop(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let scene = dir.join("scene");
    let mut args = vec!["synth", "--out", s(&scene), "--path", "loop", "--landmarks", "1500", "--seed", "4"];
    args.extend_from_slice(extra);
    let out = featslam(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    scene.join("run.toml")
}

fn coverage(report: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix("coverage: "))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no coverage line in:\n{report}"))
}

#[test]
fn synthetic_features_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_loop(dir.path(), &[]);
    let out_dir = dir.path().join("results");
    let out = featslam(&["run-slam", "--config", s(&config), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(coverage(&report) >= 0.95, "{report}");
    assert!(out_dir.join("run-00/trajectory.txt").is_file());
}

#[test]
fn five_runs_produce_five_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    let out = featslam(&["run-slam", "--dataset", "synthetic", "--runs", "5", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..5 {
        assert!(out_dir.join(format!("run-{i:02}/trajectory.txt")).is_file());
        assert!(out_dir.join(format!("run-{i:02}/report.txt")).is_file());
    }
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("seed ")).count(), 5);
    assert!(std::fs::read_to_string(out_dir.join("report.txt")).unwrap().contains("runs: 5"));
}

#[test]
fn two_invocations_write_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_loop(dir.path(), &["--noise", "0.5"]);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        assert_eq!(code(&featslam(&["run-slam", "--config", s(&config), "--out", s(&out_dir)])), 0);
        files.push(std::fs::read(out_dir.join("run-00/trajectory.txt")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn eval_reports_zero_error_for_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    synth_loop(dir.path(), &[]);
    let gt = dir.path().join("scene/groundtruth.txt");
    let plot = dir.path().join("plot.svg");
    let out = featslam(&["eval", s(&gt), s(&gt), "--plot", s(&plot)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let ate: f64 = text.lines().find_map(|l| l.strip_prefix("ate_rmse: ")).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(ate < 1e-9, "{text}");
    assert!(std::fs::read_to_string(plot).unwrap().starts_with("<svg"));
}

#[test]
fn eval_fails_on_too_few_poses() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.txt");
    std::fs::write(&p, "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n").unwrap();
    assert_ne!(code(&featslam(&["eval", s(&p), s(&p)])), 0);
}

#[test]
fn distort_with_unit_gamma_copies_images() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("render");
    let out = featslam(&["synth", "--out", s(&scene), "--render", "--frames", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let images = scene.join("sequences/00/image_0");
    let copy = dir.path().join("copy");
    assert_eq!(code(&featslam(&["distort", s(&images), "--out", s(&copy), "--gamma", "1"])), 0);
    for e in std::fs::read_dir(&images).unwrap().flatten() {
        assert_eq!(std::fs::read(e.path()).unwrap(), std::fs::read(copy.join(e.file_name())).unwrap());
    }

    let grid = dir.path().join("grid");
    assert_eq!(code(&featslam(&["distort", s(&images), "--out", s(&grid), "--gamma", "0.5", "2"])), 0);
    assert_eq!(std::fs::read_dir(grid.join("gamma-2")).unwrap().count(), 3);
    // refuses to overwrite a populated directory
    assert_ne!(code(&featslam(&["distort", s(&images), "--out", s(&grid), "--gamma", "2"])), 0);
}

#[test]
fn invalid_gamma_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    for g in ["0", "-1"] {
        let out = featslam(&["distort", s(dir.path()), "--out", s(&dir.path().join("o")), "--gamma", g]);
        assert_eq!(code(&out), 2, "gamma {g}");
    }
    assert_eq!(code(&featslam(&["run-slam", "--dataset", "synthetic", "--gamma", "0", "--out", s(dir.path())])), 2);
}

#[test]
fn missing_vocabulary_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fslv");
    let out = featslam(&["run-slam", "--dataset", "synthetic", "--vocab", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_vocab_writes_a_usable_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_loop(dir.path(), &[]);
    let features = dir.path().join("scene/features.fslf");
    let vocab = dir.path().join("voc.fslv");
    let out = featslam(&["train-vocab", "--features", s(&features), "--k", "2", "--levels", "2", "--out", s(&vocab)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&vocab).unwrap();
    let v = featslam::place_recognition::Vocabulary::from_bytes(&bytes).unwrap();
    assert_eq!(v.to_bytes(), bytes);

    let results = dir.path().join("results");
    let run = featslam(&["run-slam", "--config", s(&config), "--vocab", s(&vocab), "--out", s(&results)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let check = featslam(&["train-vocab", "--features", s(&features), "--k", "10", "--levels", "6", "--validate-only"]);
    assert_eq!(code(&check), 0, "{}", String::from_utf8_lossy(&check.stderr));
}

#[test]
fn train_vocab_rejects_a_corpus_smaller_than_k() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert_eq!(code(&featslam(&["synth", "--out", s(&scene), "--frames", "2", "--landmarks", "3"])), 0);
    let out = featslam(&["train-vocab", "--features", s(&scene.join("features.fslf")), "--k", "50", "--validate-only"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn scene_that_never_initializes_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert_eq!(code(&featslam(&["synth", "--out", s(&scene), "--frames", "12", "--landmarks", "30"])), 0);
    let features = scene.join("features.fslf");
    let vocab = dir.path().join("v.fslv");
    assert_eq!(code(&featslam(&["train-vocab", "--features", s(&features), "--k", "2", "--levels", "1", "--out", s(&vocab)])), 0);
    let out = featslam(&[
        "run-slam",
        "--config",
        s(&scene.join("run.toml")),
        "--vocab",
        s(&vocab),
        "--out",
        s(&dir.path().join("results")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_dataset_layout_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&featslam(&["run-slam", "--dataset", s(dir.path())])), 2);
}
