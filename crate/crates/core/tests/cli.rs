use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::RgbImage;

const TINY: &str = r#"
[model]
block_channels = [4, 4, 8, 8, 8]
stages = 2

[train]
batch_size = 2
max_iters = 4
warmup_iters = 2
eval_interval = 2

[data]
test_count_per_class = 2

[data.synth]
count_per_class = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lesioncascade"));
    c.env_remove("LESIONCASCADE_SEED").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed:\n{}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config and a synthetic dataset under `root`.
fn synth(root: &Path) -> std::path::PathBuf {
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    run(bin().args(["synth", "--config", path(&config), "--out", path(&data)]));
    config
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let config = synth(root);
    let data = root.join("data");
    assert!(data.join("train/labels.csv").exists());
    assert!(data.join("test/SYN_0100000_segmentation.png").exists());

    let run_dir = root.join("run");
    run(bin().args([
        "train",
        "--config",
        path(&config),
        "--data",
        path(&data.join("train")),
        "--eval-data",
        path(&data.join("test")),
        "--out",
        path(&run_dir),
    ]));
    let history = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("iteration,lr,loss,seg_JA,cls_AUC"));
    assert_eq!(history.lines().count(), 3);
    assert!(run_dir.join("config.toml").exists());

    let ckpt = run_dir.join("checkpoint.lckp");
    let eval_dir = root.join("eval");
    run(bin().args(["eval", "--checkpoint", path(&ckpt), "--data", path(&data.join("test")), "--out", path(&eval_dir)]));
    let report = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let names: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["JA", "DI", "AC_s", "GM", "AUC", "AC_r", "SE", "SP"]);
    assert!(fs::read_to_string(eval_dir.join("roc.csv")).unwrap().starts_with("auc,"));
    assert_eq!(fs::read_dir(eval_dir.join("masks")).unwrap().count(), 4);

    let pred_dir = root.join("pred");
    run(bin().args([
        "predict",
        "--checkpoint",
        path(&ckpt),
        "--image",
        path(&data.join("test/SYN_0100001.png")),
        "--out",
        path(&pred_dir),
        "--dump-descriptor",
    ]));
    assert!(pred_dir.join("SYN_0100001_segmentation.png").exists());
    let diag = fs::read_to_string(pred_dir.join("diagnosis.csv")).unwrap();
    assert_eq!(diag.lines().count(), 3);
    let descriptor = fs::read_to_string(pred_dir.join("descriptor.csv")).unwrap();
    assert_eq!(descriptor.lines().count(), 1 + 8);
}

#[test]
fn eval_is_reproducible_byte_for_byte() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let config = synth(root);
    let data = root.join("data");
    let run_dir = root.join("run");
    run(bin().args(["train", "--config", path(&config), "--data", path(&data.join("train")), "--out", path(&run_dir)]));
    let ckpt = run_dir.join("checkpoint.lckp");
    for out in ["e1", "e2"] {
        run(bin().args(["eval", "--checkpoint", path(&ckpt), "--data", path(&data.join("test")), "--out", path(&root.join(out))]));
    }
    for f in ["metrics.csv", "roc.csv", "predictions.csv"] {
        assert_eq!(fs::read(root.join("e1").join(f)).unwrap(), fs::read(root.join("e2").join(f)).unwrap());
    }
}

#[test]
fn stage_count_does_not_change_history_schema() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let config = synth(root);
    let train = root.join("data/train");
    let mut headers = Vec::new();
    for stages in ["1", "3"] {
        let out = root.join(format!("s{stages}"));
        run(bin().args(["train", "--config", path(&config), "--data", path(&train), "--out", path(&out), "--stages", stages]));
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        headers.push(csv.lines().next().unwrap().to_string());
        let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(resolved.contains(&format!("stages = {stages}")));
    }
    assert_eq!(headers[0], headers[1]);
}

#[test]
fn predict_on_black_image_gives_a_distribution() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let config = synth(root);
    let run_dir = root.join("run");
    run(bin().args(["train", "--config", path(&config), "--data", path(&root.join("data/train")), "--out", path(&run_dir)]));
    let black = root.join("black.png");
    RgbImage::new(64, 64).save(&black).unwrap();
    let out = root.join("pred");
    run(bin().args(["predict", "--checkpoint", path(&run_dir.join("checkpoint.lckp")), "--image", path(&black), "--out", path(&out)]));
    let diag = fs::read_to_string(out.join("diagnosis.csv")).unwrap();
    for line in diag.lines().skip(1) {
        let p: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(out.join("black_segmentation.png").exists());
    assert!(!out.join("descriptor.csv").exists());
}

#[test]
fn seed_precedence_env_then_file_then_flag() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let seeded = |extra: &[&str], env: Option<&str>, file: &str| -> String {
        let cfg = root.join("c.toml");
        let out = root.join("d");
        let mut cmd = bin();
        cmd.args(["synth", "--config", path(&cfg), "--out", path(&out), "--image-size", "32"]).args(extra);
        if let Some(v) = env {
            cmd.env("LESIONCASCADE_SEED", v);
        }
        fs::write(&cfg, format!("{file}\n[data]\ntest_count_per_class = 0\n[data.synth]\ncount_per_class = 1\nradius_range = [0.15, 0.2]\n")).unwrap();
        run(&mut cmd);
        fs::read_to_string(out.join("config.toml")).unwrap()
    };
    let c = seeded(&[], Some("7"), "");
    assert!(c.contains("seed = 7"), "{c}");
    let c = seeded(&[], Some("7"), "[train]\nseed = 5\n");
    assert!(c.contains("seed = 5") && c.contains("seed = 7"), "{c}");
    let c = seeded(&["--seed", "9"], Some("7"), "[train]\nseed = 5\n");
    assert!(!c.contains("seed = 5") && !c.contains("seed = 7"), "{c}");
    assert!(c.contains("image_size = 32"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn missing_files_name_the_path() {
    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent/model.lckp", "--data", "/tmp", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.lckp"));
}

#[test]
fn diverging_training_reports_the_iteration() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let config = synth(root);
    let out = bin()
        .args(["train", "--config", path(&config), "--data", path(&root.join("data/train")), "--out", path(&root.join("r"))])
        .args(["--base-lr", "1e200", "--max-iters", "6"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("iteration"), "{stderr}");
}
