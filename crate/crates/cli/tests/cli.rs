use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use objdisc_cli::{cmd_eval, cmd_fuse, cmd_gen, cmd_infer, cmd_train, CliError, RunConfig, BURN_IN_DIR, CHECKPOINT_DIR, LOSS_LOG};
use tempfile::TempDir;

fn gen_small(root: &Path, seed: u64) -> PathBuf {
    let data = root.join("data");
    let cfg = RunConfig::default()
        .with("out", data.display())
        .with("seed", seed)
        .with("train", 2)
        .with("night_train", 0)
        .with("test", 1)
        .with("night_test", 1);
    cmd_gen(&cfg).unwrap();
    data
}

fn tiny_train(data: &Path, out: &Path) -> RunConfig {
    RunConfig::default()
        .with("data", data.display())
        .with("out", out.display())
        .with("seed", 4)
        .with("width", 8)
        .with("slots", 3)
        .with("downsample", 4)
        .with("clip_len", 3)
        .with("burn_in_steps", 3)
        .with("distill_steps", 3)
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_one_entry_per_scene_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = |out: &Path| {
        RunConfig::default()
            .with("out", out.display())
            .with("seed", 9)
            .with("train", 2)
            .with("night_train", 0)
            .with("test", 1)
            .with("night_test", 0)
    };
    let a = cmd_gen(&cfg(&tmp.path().join("a"))).unwrap();
    assert_eq!(a.len(), 3);
    let b = cmd_gen(&cfg(&tmp.path().join("b"))).unwrap();
    assert_eq!(a, b);
    assert_eq!(tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));
}

#[test]
fn gen_with_zero_scenes_writes_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig::default()
        .with("out", tmp.path().display())
        .with("train", 0)
        .with("night_train", 0)
        .with("test", 0)
        .with("night_test", 0);
    assert!(cmd_gen(&cfg).unwrap().is_empty());
    assert!(objdisc::dataset::read_manifest(tmp.path()).unwrap().is_empty());
}

#[test]
fn unknown_keys_and_missing_paths_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let bad = RunConfig::default().with("out", tmp.path().display()).with("scenes", 3);
    assert!(matches!(cmd_gen(&bad), Err(CliError::Usage(_))));
    let missing = RunConfig::default().with("pred2d", tmp.path().join("nope").display());
    assert_eq!(cmd_fuse(&missing).unwrap_err().exit_code(), 1);
}

#[test]
fn missing_manifest_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_train(tmp.path(), &tmp.path().join("out"));
    assert!(matches!(cmd_train(&cfg), Err(CliError::Usage(_))));
}

#[test]
fn zero_distill_steps_gives_burn_in_only_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 1);
    let out = tmp.path().join("out");
    let s = cmd_train(&tiny_train(&data, &out).with("distill_steps", 0)).unwrap();
    assert_eq!(s.step, 3);
    let (state, _) = objdisc::distill::load_state::<f32>(&out.join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(state.phase, objdisc::losses::Phase::BurnIn);
    assert!(!out.join(BURN_IN_DIR).exists());
    let log = fs::read_to_string(out.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().skip(1).all(|l| l.contains(",burn_in,")));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 2);
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    let a = cmd_train(&tiny_train(&data, &full)).unwrap();
    cmd_train(&tiny_train(&data, &split).with("stop_at", 4)).unwrap();
    let b = cmd_train(&tiny_train(&data, &split).with("resume", true)).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(full.join(LOSS_LOG)).unwrap(), fs::read(split.join(LOSS_LOG)).unwrap());
    assert_eq!(tree_bytes(&full.join(CHECKPOINT_DIR)), tree_bytes(&split.join(CHECKPOINT_DIR)));
}

#[test]
fn infer_fuse_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 3);
    let out = tmp.path().join("out");
    cmd_train(&tiny_train(&data, &out)).unwrap();
    let ckpt = out.join(CHECKPOINT_DIR);
    let infer = |dest: &Path| {
        RunConfig::default()
            .with("data", data.display())
            .with("checkpoints", ckpt.display())
            .with("out", dest.display())
    };
    let p = tmp.path().join("pred");
    // 4 scenes × 5 frames, two modalities; night scenes included.
    assert_eq!(cmd_infer(&infer(&p)).unwrap(), 40);
    assert!(p.join("2d/test_night_000/pred_004.pgm").is_file());
    let again = tmp.path().join("pred_again");
    cmd_infer(&infer(&again)).unwrap();
    assert_eq!(tree_bytes(&p), tree_bytes(&again));

    let only2d = tmp.path().join("pred_2d");
    assert_eq!(cmd_infer(&infer(&only2d).with("modality", "2d").with("split", "night")).unwrap(), 5);
    assert!(!only2d.join("3d").exists());

    let fused = tmp.path().join("fused");
    let fuse = RunConfig::default()
        .with("pred2d", p.join("2d").display())
        .with("pred3d", p.join("3d").display())
        .with("out", fused.display());
    assert_eq!(cmd_fuse(&fuse).unwrap(), 20);

    let report = tmp.path().join("report.csv");
    let ev = RunConfig::default()
        .with("pred", fused.display())
        .with("data", data.display())
        .with("split", "test")
        .with("report", report.display());
    let r = cmd_eval(&ev).unwrap();
    assert_eq!(r.frames, 5);
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 3);
}

#[test]
fn infer_rejects_modality_checkpoint_mismatch() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 5);
    let out = tmp.path().join("out");
    cmd_train(&tiny_train(&data, &out).with("distill_steps", 0)).unwrap();
    let ckpt = out.join(CHECKPOINT_DIR);
    fs::copy(ckpt.join("teacher_3d.ckpt"), ckpt.join("teacher_2d.ckpt")).unwrap();
    let cfg = RunConfig::default()
        .with("data", data.display())
        .with("checkpoints", ckpt.display())
        .with("out", tmp.path().join("p").display())
        .with("modality", "2d");
    assert!(matches!(cmd_infer(&cfg), Err(CliError::Usage(m)) if m.contains("not a 2d checkpoint")));
}

/// Ground-truth label maps laid out as a prediction tree.
fn gt_as_predictions(data: &Path, dest: &Path) {
    for e in objdisc::dataset::read_manifest(data).unwrap() {
        fs::create_dir_all(dest.join(&e.name)).unwrap();
        for t in 0..e.frames {
            fs::copy(data.join(&e.name).join(format!("gt_{t:03}.pgm")), dest.join(&e.name).join(format!("pred_{t:03}.pgm"))).unwrap();
        }
    }
}

#[test]
fn eval_of_ground_truth_is_perfect_and_empty_is_zero_recall() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 6);
    let gt = tmp.path().join("gt");
    gt_as_predictions(&data, &gt);
    let ev = |pred: &Path| RunConfig::default().with("pred", pred.display()).with("data", data.display()).with("split", "test");
    let r = cmd_eval(&ev(&gt)).unwrap();
    assert_eq!((r.fg_ari, r.f1_50()), (1.0, 1.0));

    let empty = tmp.path().join("empty");
    for e in objdisc::dataset::read_manifest(&data).unwrap() {
        fs::create_dir_all(empty.join(&e.name)).unwrap();
        for t in 0..e.frames {
            let g = objdisc::pseudolabel::LabelGrid::new(64, 128);
            objdisc::pseudolabel::write_label_pgm(&empty.join(&e.name).join(format!("pred_{t:03}.pgm")), &g).unwrap();
        }
    }
    let r = cmd_eval(&ev(&empty).with("bands", "0-20,20-40")).unwrap();
    assert_eq!(r.recall(), 0.0);
    assert_eq!(r.bands.len(), 2);
}

#[test]
fn fusing_a_tree_with_itself_is_identity() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 7);
    let gt = tmp.path().join("gt");
    gt_as_predictions(&data, &gt);
    for tau in ["0.3", "1.0"] {
        let out = tmp.path().join(format!("fused_{tau}"));
        let cfg = RunConfig::default()
            .with("pred2d", gt.display())
            .with("pred3d", gt.display())
            .with("out", out.display())
            .with("tau", tau);
        cmd_fuse(&cfg).unwrap();
        let ev = RunConfig::default().with("pred", out.display()).with("data", data.display()).with("bands", "none");
        let r = cmd_eval(&ev).unwrap();
        assert_eq!(r.f1_50(), 1.0, "tau {tau}");
        assert_eq!(r.all_ari, 1.0, "tau {tau}");
    }
}

#[test]
fn non_finite_training_exits_with_numeric_code() {
    let tmp = TempDir::new().unwrap();
    let data = gen_small(tmp.path(), 8);
    let cfg = tiny_train(&data, &tmp.path().join("out"))
        .with("lr", 1e30)
        .with("warmup_steps", 0)
        .with("grad_clip", 0)
        .with("burn_in_steps", 20);
    let e = cmd_train(&cfg).unwrap_err();
    assert!(matches!(e, CliError::Numeric(ref m) if m.contains("at step")), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn binary_reports_single_line_errors_with_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_objdisc");
    let ok = Command::new(bin)
        .args(["gen", "--set", &format!("out={}", tmp.path().display())])
        .args(["--set", "train=1", "--set", "night_train=0", "--set", "test=0", "--set", "night_test=0"])
        .output()
        .unwrap();
    assert!(ok.status.success());

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# eval\nbands = none\n").unwrap();
    let bad = Command::new(bin)
        .args(["eval", "--config", cfg.to_str().unwrap(), "--set", "pred=/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8(bad.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");

    // A corrupt label file is a data error.
    let pred = tmp.path().join("pred/train_000");
    fs::create_dir_all(&pred).unwrap();
    fs::write(pred.join("pred_000.pgm"), b"garbage").unwrap();
    let data_err = Command::new(bin)
        .args(["eval", "--set", &format!("pred={}", tmp.path().join("pred").display())])
        .args(["--set", &format!("data={}", tmp.path().display())])
        .output()
        .unwrap();
    assert_eq!(data_err.status.code(), Some(2));
}
