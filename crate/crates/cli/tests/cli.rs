//! End-to-end behaviour of the `attnage` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnage_core::config::{RunConfig, KEY_DOCS};

fn attnage(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnage"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"
[data]
synth_count = 60

[model]
gen_base_channels = 4
gen_downsamples = 1
gen_residual_blocks = 1
disc_base_channels = 4
disc_downsamples = 2

[train]
resolution = [16, 16]
batch_size = 8
max_steps = 20
checkpoint_interval = 10

[eval.oracle]
steps = 40
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, run: &str) -> Output {
    attnage(&["train", "--config", "config.toml", "--run-dir", run], dir)
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnage(&["train", "--config", "does-not-exist.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does-not-exist.toml"));
}

#[test]
fn invalid_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "[train]\nlearnig_rate = 0.1\n");
    let out = train(dir.path(), "run");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learnig_rate"), "{}", stderr(&out));
}

#[test]
fn tiny_run_writes_one_row_per_step_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY_CONFIG);
    for run in ["a", "b"] {
        let out = train(dir.path(), run);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 21);
    assert_eq!(a, b);
    let echo = std::fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(echo.contains("max_steps = 20") && echo.contains("lambda_cls = 100.0"));
    for f in ["run.json", "checkpoints/latest.ckpt", "checkpoints/step-00000010.ckpt"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY_CONFIG);
    assert!(train(dir.path(), "full").status.success());
    assert!(train(dir.path(), "part").status.success());
    let out = attnage(
        &[
            "train",
            "--config",
            "config.toml",
            "--run-dir",
            "part",
            "--resume",
            "part/checkpoints/step-00000010.ckpt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(dir.path().join("full/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("part/metrics.csv")).unwrap()
    );
}

#[test]
fn environment_overrides_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_attnage"))
        .args(["train", "--config", "config.toml", "--run-dir", "run"])
        .current_dir(dir.path())
        .env("ATTNAGE_TRAIN__MAX_STEPS", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY_CONFIG.replace("[train]\n", "[train]\nweights = { lambda_cls = 1e308, lambda_att = 1e308 }\n");
    write_config(dir.path(), &text);
    let out = train(dir.path(), "run");
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

fn trained_checkpoint(dir: &Path) -> String {
    write_config(dir, TINY_CONFIG);
    assert!(train(dir, "run").status.success());
    "run/checkpoints/latest.ckpt".into()
}

#[test]
fn generate_writes_each_target_and_a_triptych() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let out = attnage(&["synth-data", "--n", "5", "--resolution", "16", "--out", "faces"], dir.path());
    assert!(out.status.success());
    let mut faces: Vec<String> = std::fs::read_dir(dir.path().join("faces"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    faces.sort();
    let input = format!("faces/{}", faces[0]);
    let stem = faces[0].trim_end_matches(".png").to_string();
    let input = input.as_str();
    let out = attnage(
        &["generate", "--ckpt", &ckpt, "--input", input, "--targets", "0,1,2,3,4", "--out", "gen"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("gen"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    assert_eq!(names[0], format!("{stem}_to_11-20.png"));
    assert_eq!(names[4], format!("{stem}_to_51+.png"));
    assert_eq!(names[5], format!("{stem}_triptych.png"));
    let triptych = image::open(dir.path().join("gen").join(&names[5])).unwrap();
    assert_eq!((triptych.width(), triptych.height()), (16 * 5, 16 * 3));

    // Source group 0 may be requested as a target.
    let out = attnage(
        &["generate", "--ckpt", &ckpt, "--input", input, "--targets", "0", "--out", "same"],
        dir.path(),
    );
    assert!(out.status.success());
}

#[test]
fn generate_rejects_resolution_mismatch_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    assert!(attnage(&["synth-data", "--n", "5", "--resolution", "8", "--out", "small"], dir.path())
        .status
        .success());
    let out = attnage(&["generate", "--ckpt", &ckpt, "--input", "small", "--out", "gen"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("8x8"), "{}", stderr(&out));
    let out = attnage(
        &["generate", "--ckpt", &ckpt, "--input", "small", "--out", "gen", "--resize"],
        dir.path(),
    );
    assert!(out.status.success());
}

#[test]
fn eval_threshold_edges_and_backend_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    assert!(attnage(&["train-oracle", "--config", "config.toml", "--out", "oracle.json"], dir.path())
        .status
        .success());
    assert!(attnage(&["synth-data", "--n", "10", "--resolution", "16", "--out", "test"], dir.path())
        .status
        .success());
    let rate = |threshold: &str| {
        let out = attnage(
            &[
                "eval", "--ckpt", &ckpt, "--data", "test", "--estimator", "oracle.json", "--threshold", threshold,
                "--out", "ev",
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
        let csv = std::fs::read_to_string(dir.path().join("ev/verification.csv")).unwrap();
        let all = csv.lines().find(|l| l.starts_with("all,")).unwrap().to_string();
        all.split(',').nth(3).unwrap().parse::<f64>().unwrap()
    };
    assert_eq!(rate("0"), 1.0);
    assert_eq!(rate("100.5"), 0.0);
    for f in ["age_distribution.csv", "age_distribution.md", "verification.md"] {
        assert!(dir.path().join("ev").join(f).exists());
    }

    let out = attnage(
        &["eval", "--ckpt", &ckpt, "--data", "test", "--estimator", "no-such-oracle.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no-such-oracle.json"));
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(attnage(&["synth-data", "--n", "10", "--seed", "4", "--out", out], dir.path())
            .status
            .success());
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 11);
    for f in files {
        let a = std::fs::read(dir.path().join("a").join(&f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&f)).unwrap();
        assert_eq!(a, b, "{f:?}");
    }
}

#[test]
fn help_lists_every_config_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnage(&["train", "--help"], dir.path());
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    let defaults = RunConfig::default_values();
    for d in KEY_DOCS {
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{} = ", d.key)))
            .unwrap_or_else(|| panic!("{} missing from --help", d.key));
        if let Some((_, v)) = defaults.iter().find(|(k, _)| k == d.key) {
            assert!(line.ends_with(v.as_str()), "{line} should show default {v}");
        }
    }
    assert!(help.contains("ATTNAGE_"));
}
