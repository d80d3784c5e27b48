use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 16] = [
    "--set",
    "model.base_channels=4",
    "--set",
    "model.residual_blocks=1",
    "--set",
    "model.disc_channels=4",
    "--set",
    "augment.load_size=36",
    "--set",
    "augment.crop_size=32",
    "--set",
    "eval.test_size=32",
    "--set",
    "train.epochs=1",
    "--set",
    "train.decay_start_epoch=1",
];

fn deshadow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deshadow"))
        .args(args)
        .env_remove("DESHADOW_DATA_ROOT")
        .env("DESHADOW_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn deshadow_env(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deshadow"))
        .args(args)
        .env("DESHADOW_DATA_ROOT", root)
        .env("DESHADOW_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_path(o: &Output) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().lines().last().unwrap())
}

fn synth_data(dir: &Path, count: usize, test: usize) {
    let o = deshadow(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--size",
        "40",
        "--seed",
        "3",
        "--test-count",
        &test.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn train(root: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["-q", "train", "--data-root", root.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    stdout_path(&deshadow(&args))
}

#[test]
fn metrics_of_ground_truth_against_itself_are_zero() {
    let data = tempfile::tempdir().unwrap();
    synth_data(data.path(), 3, 0);
    let d = data.path().join("train");
    let out = tempfile::tempdir().unwrap();
    let o = deshadow(&[
        "metrics",
        "--pred",
        d.join("train_C").to_str().unwrap(),
        "--gt",
        d.join("train_C").to_str().unwrap(),
        "--mask",
        d.join("train_B").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let run = stdout_path(&o);
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("metrics-"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for key in ["rmse_shadow", "rmse_nonshadow", "rmse_all"] {
        assert_eq!(report[key], 0.0, "{key}");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1, "{csv}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(deshadow(&[]).status.code(), Some(1));
    assert_eq!(deshadow(&["train", "--bogus"]).status.code(), Some(1));
    // no dataset root anywhere
    assert_eq!(deshadow(&["train"]).status.code(), Some(1));

    let data = tempfile::tempdir().unwrap();
    synth_data(data.path(), 1, 0);
    let root = data.path().to_str().unwrap();
    let o = deshadow(&["train", "--data-root", root, "--set", "train.not_a_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("not_a_key") && err.contains("lr_base"), "{err}");

    let cfg = data.path().join("bad.toml");
    fs::write(&cfg, "[train]\nalpha = 1.5\n").unwrap();
    let o = deshadow(&["train", "--data-root", root, "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.alpha"));
    assert_eq!(deshadow(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("broken.safetensors");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let img = dir.path().join("x.png");
    fs::write(&img, b"").unwrap();
    let o = deshadow(&[
        "infer",
        "--checkpoint",
        bogus.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--mask",
        img.to_str().unwrap(),
        "--out",
        dir.path().join("o.png").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn training_is_reproducible_and_the_manifest_repeats_the_run() {
    let data = tempfile::tempdir().unwrap();
    synth_data(data.path(), 3, 2);
    let out = tempfile::tempdir().unwrap();
    let a = train(data.path(), out.path(), &["--set", "train.seed=7"]);
    let b = train(data.path(), out.path(), &["--set", "train.seed=7"]);
    assert_ne!(a, b);
    let log_a = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("train_log.csv")).unwrap());
    assert_eq!(log_a.lines().count(), 4);
    for f in ["manifest.json", "config.toml", "final.safetensors", "epoch_0001.safetensors"] {
        assert!(a.join(f).is_file(), "{f}");
    }

    // the manifest's config snapshot, fed back in, reproduces the log
    let o = deshadow(&["-q", "train", "--config", a.join("manifest.json").to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    let c = stdout_path(&o);
    assert_eq!(log_a, fs::read_to_string(c.join("train_log.csv")).unwrap());

    // resuming a finished run with more epochs appends to the same log
    let o = deshadow(&[
        "-q",
        "train",
        "--resume",
        c.join("final.safetensors").to_str().unwrap(),
        "--set",
        "train.epochs=2",
    ]);
    assert_eq!(stdout_path(&o), c);
    assert_eq!(fs::read_to_string(c.join("train_log.csv")).unwrap().lines().count(), 7);

    // inference and evaluation with the trained checkpoint
    let ck = a.join("final.safetensors");
    let comp = data.path().join("test");
    let result = out.path().join("single.png");
    let o = deshadow(&[
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--image",
        comp.join("test_A/synth_0000.png").to_str().unwrap(),
        "--mask",
        comp.join("test_B/synth_0000.png").to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert_eq!(stdout_path(&o), result);
    let (w, h) = image_dims(&result);
    assert_eq!((w, h), (32, 32));

    let o = deshadow_env(&["-q", "eval", "--checkpoint", ck.to_str().unwrap(), "--out", out.path().to_str().unwrap()], data.path());
    let run = stdout_path(&o);
    assert!(run.join("images/synth_0001.png").is_file());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);
    assert!(report["rmse_shadow"].as_f64().unwrap() > 0.0);
}

fn image_dims(p: &Path) -> (u32, u32) {
    let bytes = fs::read(p).unwrap();
    // PNG IHDR width and height
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn ablate_detach_preset_gives_four_runs_and_one_table() {
    let data = tempfile::tempdir().unwrap();
    synth_data(data.path(), 2, 1);
    let out = tempfile::tempdir().unwrap();
    let mut args = vec!["-q", "ablate", "--preset", "detach", "--out", out.path().to_str().unwrap(), "--jobs", "2"];
    args.extend_from_slice(&TINY);
    let run = stdout_path(&deshadow_env(&args, data.path()));
    for v in ["detach-both", "detach-g", "detach-i", "joint"] {
        assert!(run.join(v).join("train_log.csv").is_file(), "{v}");
        assert!(run.join(v).join("metrics.json").is_file(), "{v}");
    }
    let table = fs::read_to_string(run.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("variant,overrides,steps,final_total,rmse_shadow"));
    assert!(lines[1].starts_with("detach-both,"));

    let o = deshadow_env(&["ablate", "--variant", "bad:train.tau=-1"], data.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn video_eval_scores_moving_shadow_frames() {
    let data = tempfile::tempdir().unwrap();
    synth_data(data.path(), 1, 0);
    let out = tempfile::tempdir().unwrap();
    let run = train(data.path(), out.path(), &["--set", "train.max_steps=1"]);
    let videos = tempfile::tempdir().unwrap();
    let v = videos.path().join("clip");
    fs::create_dir_all(v.join("frames")).unwrap();
    fs::create_dir_all(v.join("masks")).unwrap();
    let src = data.path().join("train");
    // two frames: the shadowed composite and its shadow-free version
    fs::copy(src.join("train_A/synth_0000.png"), v.join("frames/f0.png")).unwrap();
    fs::copy(src.join("train_C/synth_0000.png"), v.join("frames/f1.png")).unwrap();
    fs::copy(src.join("train_B/synth_0000.png"), v.join("masks/f0.png")).unwrap();
    fs::copy(src.join("train_B/synth_0000.png"), v.join("masks/f1.png")).unwrap();
    let o = deshadow(&[
        "-q",
        "video-eval",
        "--checkpoint",
        run.join("final.safetensors").to_str().unwrap(),
        "--video-root",
        videos.path().to_str().unwrap(),
        "--threshold",
        "20",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let report_dir = stdout_path(&o);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);
}
