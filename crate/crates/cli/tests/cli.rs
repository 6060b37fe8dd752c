use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
subset_fraction = 0.5
seed = 3
[classifiers]
width = 2
epochs = 1
patience = 0
batch_size = 25
[generator]
encoder_widths = [4, 8, 16]
[train]
batch_size = 10
learning_rate = 1e-3
epochs = 2
[eval]
visual_count = 2
"#;

fn mjnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mjnd")).args(args).env_remove("MJND_DATA_ROOT").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mjnd(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic archive plus a config file; returns (data dir, config path).
fn fixture(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    ok(&["synth-data", "--out", s(&data), "--train-per-file", "20", "--test-records", "40", "--synth-seed", "1"]);
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (data.to_str().unwrap().into(), cfg.to_str().unwrap().into())
}

fn train_through(run: &str, data: &str, cfg: &str) {
    for stage in [&["train-classifiers"][..], &["gen-labels", "--split", "train"], &["cache-cams", "--split", "train"], &["train-jnd"]] {
        let mut args = vec!["--run-dir", run, "--data-root", data, "--config", cfg];
        args.extend_from_slice(stage);
        ok(&args);
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&mjnd(&["frobnicate"])), 2);
    assert_eq!(code(&mjnd(&["eval", "--split", "validation"])), 2);
    assert_eq!(code(&mjnd(&[])), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rte = 1e-4\n").unwrap();
    let out = mjnd(&["--run-dir", s(&run), "--config", s(&bad), "train-classifiers"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));

    assert_eq!(code(&mjnd(&["--run-dir", s(&run), "--subset", "0", "train-classifiers"])), 2);
    // No data root anywhere.
    assert_eq!(code(&mjnd(&["--run-dir", s(&run), "train-classifiers"])), 2);
    assert_eq!(code(&mjnd(&["--help"])), 0);
}

#[test]
fn missing_prerequisite_exits_3_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let run = dir.path().join("run");
    let base = ["--run-dir", s(&run), "--data-root", &data, "--config", &cfg];

    let out = mjnd(&[&base[..], &["homogeneity"]].concat());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-jnd"));

    let out = mjnd(&[&base[..], &["gen-labels"]].concat());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-classifiers"));

    let out = mjnd(&[&base[..], &["report"]].concat());
    assert_eq!(code(&out), 3);
}

#[test]
fn full_flow_is_idempotent_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let run = dir.path().join("run");
    let r = s(&run);
    train_through(r, &data, &cfg);

    // The run directory now carries its own config.
    let base = ["--run-dir", r, "--data-root", &data];
    let again = ok(&[&base[..], &["train-classifiers"]].concat());
    assert!(again.contains("up to date"), "{again}");
    let forced = ok(&[&base[..], &["--force", "gen-labels"]].concat());
    assert!(forced.contains("gen-labels: done"), "{forced}");

    ok(&[&base[..], &["eval"]].concat());
    ok(&[&base[..], &["wgn-baseline"]].concat());
    ok(&[&base[..], &["homogeneity", "--split", "train"]].concat());
    let ids = ok(&[&base[..], &["visualize", "--split", "train"]].concat());
    assert!(ids.contains("files written"), "{ids}");
    let vis: Vec<_> = fs::read_dir(run.join("visuals")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(vis.iter().filter(|n| n.ends_with("_jnd.png")).count(), 2);
    assert!(vis.iter().any(|n| n.starts_with("trend_rca")));

    let text = ok(&[&base[..], &["report"]].concat());
    for section in ["## Training", "## Evaluation (train)", "## White-noise control (train)", "## Homogeneity sweep (train)"] {
        assert!(text.contains(section), "missing {section}");
    }
    let summary = fs::read_to_string(run.join("reports/summary.md")).unwrap();
    assert!(summary.contains("| 2 |"));
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"train-jnd\"") && manifest.contains("\"cache-cams:train\""));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_through(s(&a), &data, &cfg);
    train_through(s(&b), &data, &cfg);
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mb = fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(ma.lines().count(), 3);
    assert_eq!(ma, mb);
    assert_eq!(fs::read(a.join("cams/train.cam")).unwrap(), fs::read(b.join("cams/train.cam")).unwrap());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let run = dir.path().join("run");
    let base = ["--run-dir", s(&run), "--data-root", &data, "--config", &cfg];
    ok(&[&base[..], &["train-classifiers"]].concat());
    let out = ok(&[&base[..], &["--seed", "11", "train-classifiers"]].concat());
    assert!(out.contains("train-classifiers: done"), "{out}");
    let written = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("seed = 11"));
}
