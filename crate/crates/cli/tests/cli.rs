//! End-to-end checks of the `mvfuzz` binary: artifact layout, determinism,
//! exit codes, and the config reference in the help text.

use std::path::Path;
use std::process::{Command, Output};

fn mvfuzz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvfuzz"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_smoke_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("smoke.toml");
    std::fs::write(
        &path,
        r#"
seed = 5

[data]
instances = 120
view_dims = [6, 6, 6]
separation = 5.0

[model]
hidden_dims = [12]

[schedule]
cycle_length = 10
cycle_count = 1

[stage1]
epochs = 3
batch_size = 64

[stage2]
batch_size = 16

[stage4]
epochs = 3
batch_size = 16
warmup_epochs = 3
"#,
    )
    .unwrap();
    path
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let out = mvfuzz(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["eta_max", "cycle_length", "misalign_rate", "beta", "hidden_dims", "batch_size"] {
        assert!(text.contains(key), "--help is missing config key {key}");
    }
}

#[test]
fn gen_data_writes_declared_rows_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    std::fs::write(&cfg, "seed = 9\n[data]\ninstances = 40\nview_dims = [3, 3, 3]\n").unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let result = mvfuzz(&[
            "gen-data",
            "-c",
            cfg.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
        ]);
        assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    }

    let labels = std::fs::read_to_string(out_a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 41, "header plus 40 rows");
    let view = std::fs::read_to_string(out_a.join("view_1.csv")).unwrap();
    assert_eq!(view.lines().count(), 41);

    for name in ["view_1.csv", "view_2.csv", "view_3.csv", "labels.csv", "conflicts.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across identical seeds");
    }
}

#[test]
fn gen_data_into_unwritable_directory_leaves_no_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    // A path below a regular file can never be created.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("nested");
    let result = mvfuzz(&["gen-data", "-o", out.to_str().unwrap()]);
    assert!(!result.status.success());
    assert!(!out.exists());
}

#[test]
fn train_eval_and_reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(dir.path());
    let run = dir.path().join("run");

    let result = mvfuzz(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        run.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for artifact in [
        "manifest.json",
        "effective_config.toml",
        "stage1_log.csv",
        "stage2_log.csv",
        "stage4_log.csv",
        "division.csv",
        "stage4_model.json",
    ] {
        assert!(run.join(artifact).exists(), "{artifact} missing");
    }

    let eval1 = mvfuzz(&["eval", "--run-dir", run.to_str().unwrap()]);
    assert!(eval1.status.success(), "{}", String::from_utf8_lossy(&eval1.stderr));
    let report1 = std::fs::read_to_string(run.join("report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report1).unwrap();
    let accuracy = parsed["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert!(parsed["uncertainty_histogram"]["clean_counts"].is_array());

    // Re-evaluation is identical.
    let eval2 = mvfuzz(&["eval", "--run-dir", run.to_str().unwrap()]);
    assert!(eval2.status.success());
    let report2 = std::fs::read_to_string(run.join("report.json")).unwrap();
    assert_eq!(report1, report2);

    let divide = mvfuzz(&["divide-report", "--run-dir", run.to_str().unwrap()]);
    assert!(divide.status.success(), "{}", String::from_utf8_lossy(&divide.stderr));
    assert!(run.join("division_report.json").exists());

    let density = mvfuzz(&["density", "--run-dir", run.to_str().unwrap()]);
    assert!(density.status.success());
    assert!(run.join("density.csv").exists());
}

#[test]
fn single_stage_control_runs_and_reports_average_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(dir.path());
    let run = dir.path().join("control");
    let result = mvfuzz(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        run.to_str().unwrap(),
        "--single-stage",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("average fusion"), "{stdout}");
    assert!(run.join("control_model.json").exists());
    assert!(!run.join("division.csv").exists());
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[stage1]\nepoch = 3\n").unwrap();
    let out = dir.path().join("out");
    let result = mvfuzz(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("epoch"), "{stderr}");
}

#[test]
fn missing_csv_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("csv.toml");
    std::fs::write(
        &cfg,
        "[data]\nsource = \"csv\"\n[data.csv]\nview_paths = [\"/nonexistent/v1.csv\"]\nlabel_file = \"/nonexistent/labels.csv\"\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let result = mvfuzz(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(3));
}

#[test]
fn eval_of_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(dir.path());
    let run = dir.path().join("run");
    let result = mvfuzz(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        run.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    std::fs::remove_file(run.join("stage4_model.json")).unwrap();
    let eval = mvfuzz(&["eval", "--run-dir", run.to_str().unwrap()]);
    assert!(!eval.status.success());
}

#[test]
fn corrupt_rewrites_csv_dataset_with_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    // First generate a clean dataset.
    let gen_cfg = dir.path().join("gen.toml");
    std::fs::write(
        &gen_cfg,
        "seed = 3\n[data]\ninstances = 30\nview_dims = [3, 3, 3]\n[data.corruption]\nmisalign_rate = 0.0\nnoise_rate = 0.0\n",
    )
    .unwrap();
    let clean = dir.path().join("clean");
    assert!(mvfuzz(&["gen-data", "-c", gen_cfg.to_str().unwrap(), "-o", clean.to_str().unwrap()])
        .status
        .success());

    // Then corrupt it through the CSV path.
    let corrupt_cfg = dir.path().join("corrupt.toml");
    std::fs::write(
        &corrupt_cfg,
        format!(
            "seed = 4\n[data]\nsource = \"csv\"\n[data.csv]\nview_paths = [\"{c}/view_1.csv\", \"{c}/view_2.csv\", \"{c}/view_3.csv\"]\nlabel_file = \"{c}/labels.csv\"\n[data.corruption]\nmisalign_rate = 0.5\nnoise_rate = 0.0\n",
            c = clean.display()
        ),
    )
    .unwrap();
    let corrupted = dir.path().join("corrupted");
    let result = mvfuzz(&[
        "corrupt",
        "-c",
        corrupt_cfg.to_str().unwrap(),
        "-o",
        corrupted.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let conflicts = std::fs::read_to_string(corrupted.join("conflicts.csv")).unwrap();
    let misaligned = conflicts.lines().filter(|l| l.contains("misaligned")).count();
    assert_eq!(misaligned, 15, "half of 30 instances, one view each");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    std::fs::write(&cfg, "seed = 9\n[data]\ninstances = 20\nview_dims = [3, 3, 3]\n").unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    assert!(mvfuzz(&["gen-data", "-c", cfg.to_str().unwrap(), "-o", out_a.to_str().unwrap()])
        .status
        .success());
    assert!(mvfuzz(&[
        "gen-data",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out_b.to_str().unwrap(),
        "--seed",
        "10",
    ])
    .status
    .success());
    let a = std::fs::read(out_a.join("view_1.csv")).unwrap();
    let b = std::fs::read(out_b.join("view_1.csv")).unwrap();
    assert_ne!(a, b, "seed override must change the data");
    let echoed = std::fs::read_to_string(out_b.join("effective_config.toml")).unwrap();
    assert!(echoed.contains("seed = 10"), "{echoed}");
}
