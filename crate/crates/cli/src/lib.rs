//! Reproducible workflows over the object-discovery library: dataset
//! generation, training, inference, late fusion and evaluation.
//!
//! Every command takes a [`RunConfig`] and touches only the paths it names.
//! All randomness comes from the `seed` key.

pub mod config;

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use objdisc::dataset::{self, DataError, ManifestEntry, Sequence, Split, ToyDatasetConfig, MANIFEST_FILE};
use objdisc::distill::{
    load_model, load_state, params_checksum, predict_sequence, save_state, stats_from_meta, DistillError, TrainConfig, Trainer,
};
use objdisc::evalfuse::{labels_of, late_fuse, EvalError, Evaluator, InstanceMode, MetricsReport, DEFAULT_BANDS, DEFAULT_TAU};
use objdisc::losses::{LossTerm, Modality};
use objdisc::pseudolabel::{read_label_pgm, write_label_pgm, PseudoError};
use objdisc::slotcore::ModelConfig;
use objdisc::synthgen::SynthError;

pub use config::{parse_bands, RunConfig};

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            DistillError::Config(_) | DistillError::KeepRate(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(DataError, PseudoError, EvalError, SynthError, std::io::Error);

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub const GEN_KEYS: &[&str] = &["out", "seed", "train", "night_train", "test", "night_test", "night_strength"];

/// Writes a generated toy dataset and its manifest; returns the entries.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<ManifestEntry>, CliError> {
    cfg.check_keys(GEN_KEYS)?;
    let d = ToyDatasetConfig::default();
    let toy = ToyDatasetConfig {
        seed: cfg.get("seed", d.seed)?,
        train: cfg.get("train", d.train)?,
        night_train: cfg.get("night_train", d.night_train)?,
        test: cfg.get("test", d.test)?,
        night_test: cfg.get("night_test", d.night_test)?,
        night_strength: cfg.get("night_strength", d.night_strength)?,
    };
    let out: PathBuf = cfg.require("out")?;
    fs::create_dir_all(&out).map_err(io_at(&out))?;
    let mut entries = Vec::new();
    for (name, split, bundle) in dataset::toy_scenes(&toy)? {
        entries.push(dataset::write_scene(&out, &name, split, &bundle)?);
    }
    dataset::write_manifest(&out, &entries)?;
    log::info!("wrote {} scenes to {}", entries.len(), out.display());
    Ok(entries)
}

pub const TRAIN_KEYS: &[&str] = &[
    "data",
    "out",
    "seed",
    "resume",
    "stop_at",
    "checkpoint_every",
    "width",
    "slots",
    "downsample",
    "batch_size",
    "clip_len",
    "burn_in_steps",
    "distill_steps",
    "lr",
    "warmup_steps",
    "lr_floor",
    "grad_clip",
    "keep_rate",
    "completion",
    "completion_drop",
    "min_area",
    "conf_threshold",
    "dedup_iou",
    "weight_motion",
    "weight_recon",
    "weight_completion",
    "weight_bg",
    "weight_dist_2d_to_3d",
    "weight_dist_3d_to_2d",
];

/// Checkpoint directory of the final (or latest) training state.
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Snapshot taken when burn-in ends, kept for comparison.
pub const BURN_IN_DIR: &str = "burn_in";
pub const LOSS_LOG: &str = "loss.csv";

fn model_config(cfg: &RunConfig, in_channels: usize) -> Result<ModelConfig, CliError> {
    let mut m = ModelConfig::new(in_channels);
    m.width = cfg.get("width", m.width)?;
    m.stem_width = (m.width / 2).max(1);
    m.mlp_hidden = 2 * m.width;
    m.num_slots = cfg.get("slots", m.num_slots)?;
    m.downsample = cfg.get("downsample", m.downsample)?;
    Ok(m)
}

/// Training hyper-parameters from a run config; unset keys keep the
/// library defaults.
pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let mut t = TrainConfig {
        seed: cfg.get("seed", d.seed)?,
        model_2d: model_config(cfg, 3)?,
        model_3d: model_config(cfg, 4)?,
        batch_size: cfg.get("batch_size", d.batch_size)?,
        clip_len: cfg.get("clip_len", d.clip_len)?,
        burn_in_steps: cfg.get("burn_in_steps", d.burn_in_steps)?,
        distill_steps: cfg.get("distill_steps", d.distill_steps)?,
        lr: cfg.get("lr", d.lr)?,
        warmup_steps: cfg.get("warmup_steps", d.warmup_steps)?,
        lr_floor: cfg.get("lr_floor", d.lr_floor)?,
        grad_clip: cfg.get("grad_clip", d.grad_clip)?,
        keep_rate: cfg.get("keep_rate", d.keep_rate)?,
        completion: cfg.get("completion", d.completion)?,
        completion_drop: cfg.get("completion_drop", d.completion_drop)?,
        min_area: cfg.get("min_area", d.min_area)?,
        conf_threshold: cfg.get("conf_threshold", d.conf_threshold)?,
        dedup_iou: cfg.get("dedup_iou", d.dedup_iou)?,
        ..d
    };
    let terms = [
        ("weight_motion", LossTerm::Motion),
        ("weight_recon", LossTerm::Reconstruction),
        ("weight_completion", LossTerm::Completion),
        ("weight_bg", LossTerm::Background),
        (
            "weight_dist_2d_to_3d",
            LossTerm::Distill {
                from: Modality::Rgb,
                to: Modality::Lidar,
            },
        ),
        (
            "weight_dist_3d_to_2d",
            LossTerm::Distill {
                from: Modality::Lidar,
                to: Modality::Rgb,
            },
        ),
    ];
    for (key, term) in terms {
        if cfg.raw(key).is_some() {
            t.weights.0.insert(term, cfg.require(key)?);
        }
    }
    t.validate()?;
    Ok(t)
}

/// Outcome of a training command.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub step: u64,
    /// Parameter checksums in `objdisc::distill::CHECKPOINT_FILES` order.
    pub checksums: [u64; 4],
}

fn open_dataset(cfg: &RunConfig) -> Result<(PathBuf, Vec<Sequence>), CliError> {
    let data = cfg.existing_path("data")?;
    if !data.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!("{}: no {MANIFEST_FILE}", data.display())));
    }
    let seqs = dataset::load_dataset(&data)?;
    Ok((data, seqs))
}

/// Burn-in then distillation on the train split. Writes `out/loss.csv`
/// and the four models under `out/checkpoints`; with `resume = true`
/// continues from those checkpoints and appends to the log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.check_keys(TRAIN_KEYS)?;
    let tc = train_config(cfg)?;
    let (_, seqs) = open_dataset(cfg)?;
    let train: Vec<Sequence> = seqs.into_iter().filter(|s| s.split == Split::Train).collect();
    let out: PathBuf = cfg.require("out")?;
    let resume: bool = cfg.get("resume", false)?;
    let stop_at: u64 = cfg.get("stop_at", u64::MAX)?;
    let every: u64 = cfg.get("checkpoint_every", 0)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&out).map_err(io_at(&out))?;

    let mut trainer = if resume {
        if !ckpt.is_dir() {
            return Err(CliError::Usage(format!("resume: {} does not exist", ckpt.display())));
        }
        let (state, stats) = load_state::<f32>(&ckpt)?;
        if state.rng_seed != tc.seed {
            return Err(CliError::Usage(format!("resume: checkpoint seed {} differs from seed {}", state.rng_seed, tc.seed)));
        }
        Trainer::with_state(tc.clone(), state, stats, &train)?
    } else {
        Trainer::<f32>::new(tc.clone(), &train)?
    };
    fs::write(out.join("resolved.cfg"), cfg.to_text()).map_err(io_at(&out))?;

    let log_path = out.join(LOSS_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(io_at(&log_path))?;
    let mut log = BufWriter::new(file);
    if !resume {
        writeln!(log, "{}", Trainer::<f32>::log_header()).map_err(io_at(&log_path))?;
    }

    let end = stop_at.min(tc.total_steps());
    while trainer.state.step < end {
        let mut next = end;
        if every > 0 {
            next = next.min((trainer.state.step / every + 1) * every);
        }
        if trainer.state.step < tc.burn_in_steps {
            next = next.min(tc.burn_in_steps);
        }
        trainer.run_until(next, Some(&mut log))?;
        log.flush().map_err(io_at(&log_path))?;
        if trainer.state.step == tc.burn_in_steps && tc.distill_steps > 0 {
            save_state(&out.join(BURN_IN_DIR), &trainer.state, &trainer.stats)?;
        }
        if every > 0 && trainer.state.step % every == 0 {
            save_state(&ckpt, &trainer.state, &trainer.stats)?;
        }
    }
    save_state(&ckpt, &trainer.state, &trainer.stats)?;
    let s = &trainer.state;
    let checksums = [
        params_checksum(&s.pair2d.student.params),
        params_checksum(&s.pair2d.teacher.params),
        params_checksum(&s.pair3d.student.params),
        params_checksum(&s.pair3d.teacher.params),
    ];
    log::info!("trained to step {}; checkpoints in {}", s.step, ckpt.display());
    Ok(TrainSummary { step: s.step, checksums })
}

pub const INFER_KEYS: &[&str] = &["data", "checkpoints", "out", "modality", "split", "role", "min_area", "instances"];

fn parse_modalities(s: &str) -> Result<Vec<Modality>, CliError> {
    match s {
        "2d" => Ok(vec![Modality::Rgb]),
        "3d" => Ok(vec![Modality::Lidar]),
        "both" => Ok(vec![Modality::Rgb, Modality::Lidar]),
        _ => Err(CliError::Usage(format!("modality {s:?}: expected 2d, 3d or both"))),
    }
}

fn parse_split(cfg: &RunConfig) -> Result<Option<Split>, CliError> {
    match cfg.raw("split") {
        None | Some("all") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|e: String| CliError::Usage(format!("split: {e}"))),
    }
}

fn pred_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("pred_{t:03}.pgm"))
}

/// Writes `out/<2d|3d>/<scene>/pred_XXX.pgm` label maps for each scene of
/// the selected split. Returns the number of files written.
pub fn cmd_infer(cfg: &RunConfig) -> Result<usize, CliError> {
    cfg.check_keys(INFER_KEYS)?;
    let ckpt = cfg.existing_path("checkpoints")?;
    let out: PathBuf = cfg.require("out")?;
    let modalities = parse_modalities(cfg.raw("modality").unwrap_or("both"))?;
    let split = parse_split(cfg)?;
    let role = cfg.raw("role").unwrap_or("teacher");
    if role != "student" && role != "teacher" {
        return Err(CliError::Usage(format!("role {role:?}: expected student or teacher")));
    }
    let min_area: usize = cfg.get("min_area", objdisc::pseudolabel::DEFAULT_MIN_AREA)?;
    let mode = match cfg.raw("instances").unwrap_or("components") {
        "components" => InstanceMode::Components,
        "slots" => InstanceMode::Slots,
        s => return Err(CliError::Usage(format!("instances {s:?}: expected components or slots"))),
    };
    let (_, seqs) = open_dataset(cfg)?;
    let mut written = 0;
    for m in modalities {
        let path = ckpt.join(format!("{role}_{}.ckpt", m.tag()));
        if !path.is_file() {
            return Err(CliError::Usage(format!("no {} checkpoint at {}", m.tag(), path.display())));
        }
        let (model, meta) = load_model::<f32>(&path)?;
        let want_ch = if m == Modality::Rgb { 3 } else { 4 };
        if meta.get("modality").map(String::as_str) != Some(m.tag()) || model.config.in_channels != want_ch {
            return Err(CliError::Usage(format!("{} is not a {} checkpoint", path.display(), m.tag())));
        }
        let stats = stats_from_meta::<f32>(&meta).ok_or_else(|| CliError::Data(format!("{}: no normalization stats", path.display())))?;
        for seq in seqs.iter().filter(|s| split.is_none_or(|sp| s.split == sp)) {
            let dir = out.join(m.tag()).join(&seq.name);
            fs::create_dir_all(&dir).map_err(io_at(&dir))?;
            for (t, p) in predict_sequence(&model, seq, m, &stats, min_area, mode)?.iter().enumerate() {
                write_label_pgm(&pred_path(&dir, t), &labels_of(p))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

pub const FUSE_KEYS: &[&str] = &["pred2d", "pred3d", "out", "tau"];

fn sorted_entries(dir: &Path, want_dir: bool) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).map_err(io_at(dir))? {
        let e = e.map_err(io_at(dir))?;
        if e.path().is_dir() == want_dir {
            names.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Late fusion of two prediction trees with matching `<scene>/pred_XXX.pgm`
/// layout. Returns the number of fused frames.
pub fn cmd_fuse(cfg: &RunConfig) -> Result<usize, CliError> {
    cfg.check_keys(FUSE_KEYS)?;
    let p2 = cfg.existing_path("pred2d")?;
    let p3 = cfg.existing_path("pred3d")?;
    let out: PathBuf = cfg.require("out")?;
    let tau: f64 = cfg.get("tau", DEFAULT_TAU)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::Usage(format!("tau {tau} outside [0, 1]")));
    }
    let mut fused = 0;
    for scene in sorted_entries(&p2, true)? {
        let dir = out.join(&scene);
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        for file in sorted_entries(&p2.join(&scene), false)?.into_iter().filter(|f| f.ends_with(".pgm")) {
            let a = read_label_pgm(&p2.join(&scene).join(&file))?.to_masks(0);
            let b = read_label_pgm(&p3.join(&scene).join(&file))?.to_masks(0);
            write_label_pgm(&dir.join(&file), &labels_of(&late_fuse(&a, &b, tau)?))?;
            fused += 1;
        }
    }
    Ok(fused)
}

pub const EVAL_KEYS: &[&str] = &["pred", "data", "split", "bands", "report", "threshold"];

/// Scores `pred/<scene>/pred_XXX.pgm` against the dataset's ground truth.
/// Distance bands come from the LiDAR front views; `bands = none` disables
/// them. Writes the CSV report to `report` (default `pred/metrics.csv`).
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    cfg.check_keys(EVAL_KEYS)?;
    let pred = cfg.existing_path("pred")?;
    let split = parse_split(cfg)?;
    let bands = match cfg.raw("bands") {
        None => DEFAULT_BANDS.to_vec(),
        Some("none") => Vec::new(),
        Some(s) => parse_bands(s)?,
    };
    let threshold: f64 = cfg.get("threshold", 0.5)?;
    let report: PathBuf = cfg.get("report", pred.join("metrics.csv"))?;
    let (_, seqs) = open_dataset(cfg)?;
    let mut ev = Evaluator::new(&bands, threshold);
    for seq in seqs.iter().filter(|s| split.is_none_or(|sp| s.split == sp)) {
        let dir = pred.join(&seq.name);
        for t in 0..seq.len() {
            let p = read_label_pgm(&pred_path(&dir, t))?.to_masks(t as u64);
            let fv = (!bands.is_empty()).then(|| &seq.front_views[t]);
            ev.add_frame(&p, &seq.gt[t], fv)?;
        }
    }
    let r = ev.finish();
    fs::write(&report, r.to_csv()).map_err(io_at(&report))?;
    log::info!("\n{}", r.to_table());
    Ok(r)
}
