//! CLI surface: every subcommand exercised end to end through the binary.

use std::path::Path;
use std::process::Command;

fn finetail() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_finetail"));
    cmd.env("FINETAIL_LOG", "quiet");
    cmd
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let ds_cfg = dir.path().join("dataset.json");
    let ds_path = dir.path().join("ds.json");
    let counts_csv = dir.path().join("counts.csv");
    write(
        &ds_cfg,
        r#"{"num_meta_categories":4,"subclasses_per_meta":3,"feature_dim":16,
            "head_count":60,"imbalance_ratio":0.02,"intra_class_noise":1.0,
            "inter_subclass_gap":1.5,"meta_fidelity":0.9,"unlabeled_fraction":0.3,"seed":3}"#,
    );

    // generate
    let out = finetail()
        .args(["generate", "--config"])
        .arg(&ds_cfg)
        .arg("--out")
        .arg(&ds_path)
        .arg("--counts-csv")
        .arg(&counts_csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ds_path.exists());
    let counts = std::fs::read_to_string(&counts_csv).unwrap();
    assert!(counts.starts_with("class,count\n0,60\n"));

    // train
    let run_dir = dir.path().join("run");
    let run_cfg = dir.path().join("run.json");
    write(
        &run_cfg,
        &format!(
            r#"{{"dataset":{},"epochs":6,"batch_size":8,"hidden":[8],"embed_dim":6,
                "meta_dim":3,"proj_hidden":6,"proj_dim":4,"pred_hidden":6,
                "base_lr":0.05,"seed":3,"output_dir":{:?}}}"#,
            std::fs::read_to_string(&ds_cfg).unwrap(),
            run_dir.to_str().unwrap()
        ),
    );
    let out = finetail()
        .args(["train", "--config"])
        .arg(&run_cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("macro-F1"), "{stdout}");
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("model.ckpt").exists());
    assert!(run_dir.join("predictions.csv").exists());

    // eval on the test split, writing a prediction CSV
    let eval_preds = dir.path().join("eval_preds.csv");
    let out = finetail()
        .args(["eval", "--checkpoint"])
        .arg(run_dir.join("model.ckpt"))
        .arg("--dataset")
        .arg(&ds_path)
        .args(["--split", "test", "--out"])
        .arg(&eval_preds)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test macro-F1"));
    assert!(eval_preds.exists());

    // tta eval
    let out = finetail()
        .args(["tta", "--checkpoint"])
        .arg(run_dir.join("model.ckpt"))
        .arg("--dataset")
        .arg(&ds_path)
        .args(["--split", "test", "--views", "5", "--jitter", "0.2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // pseudo: promote 30% of the unlabeled pool
    let aug_ds = dir.path().join("augmented.json");
    let out = finetail()
        .args(["pseudo", "--preds"])
        .arg(&eval_preds)
        .arg("--dataset")
        .arg(&ds_path)
        .args(["--fraction", "0.3", "--out"])
        .arg(&aug_ds)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("promoted"), "{stdout}");
    // The augmented dataset has strictly more train samples.
    let before = finetail::datagen::Dataset::read_file(&ds_path).unwrap();
    let after = finetail::datagen::Dataset::read_file(&aug_ds).unwrap();
    let trains = |ds: &finetail::datagen::Dataset| {
        ds.split
            .iter()
            .filter(|s| **s == finetail::datagen::Split::Train)
            .count()
    };
    assert!(trains(&after) > trains(&before));

    // ensemble of the same predictions three times is idempotent: its
    // macro-F1 equals a single model's.
    let fused = dir.path().join("fused.csv");
    let out = finetail()
        .args(["ensemble", "--preds"])
        .arg(&eval_preds)
        .arg(&eval_preds)
        .arg(&eval_preds)
        .arg("--dataset")
        .arg(&ds_path)
        .arg("--out")
        .arg(&fused)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ensemble macro-F1"));
    assert!(fused.exists());

    // report
    let report_dir = dir.path().join("reports");
    let out = finetail()
        .args(["report", "--manifests"])
        .arg(run_dir.join("manifest.json"))
        .arg("--out-dir")
        .arg(&report_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ablation = std::fs::read_to_string(report_dir.join("ablation.csv")).unwrap();
    assert!(ablation.lines().count() == 2);
    assert!(report_dir.join("class_counts.csv").exists());
}

#[test]
fn gradcheck_subcommand_passes_quickly() {
    let out = finetail()
        .args(["gradcheck", "--trials", "5", "--seed", "7"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS").count(), 8, "{stdout}");
}

#[test]
fn failures_exit_nonzero_with_stage_diagnostics() {
    // Missing config file.
    let out = finetail()
        .args(["train", "--config", "/nonexistent/run.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[config]") || err.contains("[train]"), "{err}");

    // Corrupted checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let ds_path = dir.path().join("ds.json");
    let ds = finetail::datagen::generate(&finetail::datagen::DatasetConfig {
        head_count: 20,
        ..Default::default()
    })
    .unwrap();
    ds.write_file(&ds_path).unwrap();
    let out = finetail()
        .args(["eval", "--checkpoint"])
        .arg(&bad)
        .arg("--dataset")
        .arg(&ds_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
}
