//! Full training loop over a dataset, with checkpointing and resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sequence;
use crate::losses::{Modality, Phase};
use crate::pcproj::{drop_points, normalize_front_view, ChannelStats};
use crate::scalar::Scalar;
use crate::evalfuse::{predict_instances, InstanceMode};
use crate::pseudolabel::MaskSet;
use crate::slotcore::{read_checkpoint, write_checkpoint, ModelConfig, SlotModel};
use crate::tensor::Tensor;

use super::{
    burn_in_step, distill_step, front_view_stats, mix_seed, Adam, Batch, Clip, DistillError, ModelPair, StepReport, TrainConfig,
    TrainState, LOG_HEADER,
};

/// Model files written by [`save_state`], in a fixed order.
pub const CHECKPOINT_FILES: [&str; 4] = ["student_2d.ckpt", "teacher_2d.ckpt", "student_3d.ckpt", "teacher_3d.ckpt"];

impl<T: Scalar> Clip<T> {
    /// Whole sequence as one clip, front views normalized with `stats`.
    pub fn from_sequence(seq: &Sequence, stats: &ChannelStats<T>) -> Result<Self, DistillError> {
        let front_views = seq
            .front_views
            .iter()
            .map(|fv| normalize_front_view(&fv.cast::<T>(), stats).map_err(|e| DistillError::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            rgb: seq.rgb.iter().map(|f| f.cast()).collect(),
            front_views,
            motion: seq.motion.clone(),
        })
    }

    /// Frames `start .. start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let r = start..start + len;
        Self {
            rgb: self.rgb[r.clone()].to_vec(),
            front_views: self.front_views[r.clone()].to_vec(),
            motion: self.motion[r].to_vec(),
        }
    }
}

/// Training state bound to its data.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
    pub stats: ChannelStats<T>,
    clips: Vec<Clip<T>>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh models; normalization statistics come from `train`.
    pub fn new(config: TrainConfig, train: &[Sequence]) -> Result<Self, DistillError> {
        let stats = front_view_stats(train.iter().flat_map(|s| s.front_views.iter()))
            .ok_or_else(|| DistillError::Config("training set has no valid LiDAR pixels".into()))?;
        let stats = ChannelStats {
            min: stats.min.map(|v| T::lit(f64::from(v))),
            max: stats.max.map(|v| T::lit(f64::from(v))),
        };
        let state = TrainState::init(&config)?;
        Self::with_state(config, state, stats, train)
    }

    pub fn with_state(config: TrainConfig, state: TrainState<T>, stats: ChannelStats<T>, train: &[Sequence]) -> Result<Self, DistillError> {
        config.validate()?;
        if train.is_empty() {
            return Err(DistillError::Config("no training sequences".into()));
        }
        let clips: Vec<Clip<T>> = train.iter().map(|s| Clip::from_sequence(s, &stats)).collect::<Result<_, _>>()?;
        if let Some(c) = clips.iter().find(|c| c.len() < config.clip_len) {
            return Err(DistillError::Config(format!("sequence of {} frames is shorter than clip_len {}", c.len(), config.clip_len)));
        }
        let size = clips[0].size();
        if clips.iter().any(|c| c.size() != size) {
            return Err(DistillError::Config("training sequences differ in image size".into()));
        }
        Ok(Self {
            config,
            state,
            stats,
            clips,
        })
    }

    /// Batch of step `step`: clips drawn uniformly with replacement, each
    /// with a random window start. A pure function of seed and step.
    pub fn sample_batch(&self, step: u64) -> Batch<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.seed, step), 0xBA7C));
        let clips = (0..self.config.batch_size)
            .map(|_| {
                let c = &self.clips[rng.gen_range(0..self.clips.len())];
                let start = rng.gen_range(0..=c.len() - self.config.clip_len);
                c.window(start, self.config.clip_len)
            })
            .collect();
        Batch { clips }
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps()
    }

    /// Runs the next step in whichever phase it belongs to.
    pub fn step(&mut self) -> Result<StepReport, DistillError> {
        let batch = self.sample_batch(self.state.step);
        self.state.phase = if self.state.step < self.config.burn_in_steps {
            Phase::BurnIn
        } else {
            Phase::Distill
        };
        match self.state.phase {
            Phase::BurnIn => burn_in_step(&mut self.state, &batch, &self.config),
            Phase::Distill => distill_step(&mut self.state, &batch, &self.config),
        }
    }

    /// Steps until `until` (exclusive) or the end of the schedule, writing
    /// one CSV row per step to `log`.
    pub fn run_until(&mut self, until: u64, mut log: Option<&mut dyn Write>) -> Result<(), DistillError> {
        let end = until.min(self.config.total_steps());
        while self.state.step < end {
            let r = self.step()?;
            if r.step % 100 == 0 {
                log::info!(
                    "step {} {} lr {:.2e} loss2d {:.4} loss3d {:.4} cand {}/{}",
                    r.step,
                    r.phase,
                    r.lr,
                    r.rgb.total,
                    r.lidar.total,
                    r.candidates.0,
                    r.candidates.1
                );
            }
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", r.csv_row())?;
            }
        }
        Ok(())
    }

    pub fn log_header() -> &'static str {
        LOG_HEADER
    }
}

fn stats_meta<T: Scalar>(meta: &mut BTreeMap<String, String>, stats: &ChannelStats<T>) {
    for ch in 0..4 {
        meta.insert(format!("fv_min{ch}"), format!("{:e}", stats.min[ch].as_f64()));
        meta.insert(format!("fv_max{ch}"), format!("{:e}", stats.max[ch].as_f64()));
    }
}

/// Normalization statistics stored in a checkpoint's metadata.
pub fn stats_from_meta<T: Scalar>(meta: &BTreeMap<String, String>) -> Option<ChannelStats<T>> {
    let get = |k: String| meta.get(&k)?.parse::<f64>().ok().map(T::lit);
    let mut s = ChannelStats {
        min: [T::zero(); 4],
        max: [T::zero(); 4],
    };
    for ch in 0..4 {
        s.min[ch] = get(format!("fv_min{ch}"))?;
        s.max[ch] = get(format!("fv_max{ch}"))?;
    }
    Some(s)
}

fn meta_for<T: Scalar>(cfg: &ModelConfig, m: Modality, role: &str, state: &TrainState<T>, stats: &ChannelStats<T>) -> BTreeMap<String, String> {
    let mut meta = cfg.to_meta();
    meta.insert("modality".into(), m.tag().into());
    meta.insert("role".into(), role.into());
    meta.insert("step".into(), state.step.to_string());
    meta.insert("phase".into(), state.phase.to_string());
    meta.insert("seed".into(), state.rng_seed.to_string());
    meta.insert("keep_rate".into(), state.keep_rate.to_string());
    stats_meta(&mut meta, stats);
    meta
}

/// Writes the four models and both optimizers under `dir`.
pub fn save_state<T: Scalar>(dir: &Path, state: &TrainState<T>, stats: &ChannelStats<T>) -> Result<(), DistillError> {
    std::fs::create_dir_all(dir)?;
    for pair in [&state.pair2d, &state.pair3d] {
        let tag = pair.modality.tag();
        for (role, model) in [("student", &pair.student), ("teacher", &pair.teacher)] {
            let meta = meta_for(&model.config, pair.modality, role, state, stats);
            write_checkpoint(&dir.join(format!("{role}_{tag}.ckpt")), &meta, &model.params)?;
        }
        let (m, v) = pair.optim.to_params(&pair.student.params);
        let mut meta = meta_for(&pair.student.config, pair.modality, "optim", state, stats);
        meta.insert("adam_t".into(), pair.optim.t.to_string());
        write_checkpoint(&dir.join(format!("optim_{tag}_m.ckpt")), &meta, &m)?;
        write_checkpoint(&dir.join(format!("optim_{tag}_v.ckpt")), &meta, &v)?;
    }
    Ok(())
}

/// One model checkpoint with its metadata.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(SlotModel<T>, BTreeMap<String, String>), DistillError> {
    let ck = read_checkpoint::<T>(path)?;
    let cfg = ModelConfig::from_meta(&ck.meta)?;
    Ok((SlotModel::from_params(cfg, ck.params)?, ck.meta))
}

/// Reads back what [`save_state`] wrote.
pub fn load_state<T: Scalar>(dir: &Path) -> Result<(TrainState<T>, ChannelStats<T>), DistillError> {
    let mut pairs = Vec::new();
    let mut meta0 = BTreeMap::new();
    for m in [Modality::Rgb, Modality::Lidar] {
        let tag = m.tag();
        let (student, meta) = load_model::<T>(&dir.join(format!("student_{tag}.ckpt")))?;
        let (teacher, _) = load_model::<T>(&dir.join(format!("teacher_{tag}.ckpt")))?;
        let om = read_checkpoint::<T>(&dir.join(format!("optim_{tag}_m.ckpt")))?;
        let ov = read_checkpoint::<T>(&dir.join(format!("optim_{tag}_v.ckpt")))?;
        let t = om
            .meta
            .get("adam_t")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DistillError::Config("optimizer checkpoint lacks adam_t".into()))?;
        if !om.params.same_layout(&student.params) || !ov.params.same_layout(&student.params) || !teacher.params.same_layout(&student.params) {
            return Err(DistillError::Layout(format!("{tag} checkpoints")));
        }
        pairs.push(ModelPair {
            modality: m,
            teacher,
            optim: Adam::from_params(&om.params, &ov.params, t),
            student,
        });
        if m == Modality::Rgb {
            meta0 = meta;
        }
    }
    let field = |k: &str| meta0.get(k).cloned().ok_or_else(|| DistillError::Config(format!("checkpoint lacks {k}")));
    let parse_err = |k: &str| DistillError::Config(format!("bad checkpoint field {k}"));
    let step = field("step")?.parse().map_err(|_| parse_err("step"))?;
    let seed = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
    let keep_rate = field("keep_rate")?.parse().map_err(|_| parse_err("keep_rate"))?;
    let phase = match field("phase")?.as_str() {
        "burn_in" => Phase::BurnIn,
        "distill" => Phase::Distill,
        _ => return Err(parse_err("phase")),
    };
    let stats = stats_from_meta(&meta0).ok_or_else(|| parse_err("fv stats"))?;
    let pair3d = pairs.pop().unwrap();
    let pair2d = pairs.pop().unwrap();
    Ok((
        TrainState {
            pair2d,
            pair3d,
            phase,
            step,
            keep_rate,
            rng_seed: seed,
        },
        stats,
    ))
}

/// Model input frames of a sequence for one modality.
pub fn model_inputs<T: Scalar>(seq: &Sequence, m: Modality, stats: &ChannelStats<T>) -> Result<Vec<Tensor<T>>, DistillError> {
    match m {
        Modality::Rgb => Ok(seq.rgb.iter().map(|f| f.cast()).collect()),
        Modality::Lidar => seq
            .front_views
            .iter()
            .map(|fv| {
                normalize_front_view(&fv.cast::<T>(), stats)
                    .map(|n| n.to_tensor())
                    .map_err(|e| DistillError::Config(e.to_string()))
            })
            .collect(),
    }
}

/// Instance predictions for every frame of a sequence at image resolution.
pub fn predict_sequence<T: Scalar>(
    model: &SlotModel<T>,
    seq: &Sequence,
    m: Modality,
    stats: &ChannelStats<T>,
    min_area: usize,
    mode: InstanceMode,
) -> Result<Vec<MaskSet>, DistillError> {
    let frames = model_inputs(seq, m, stats)?;
    let (h, w) = (seq.height(), seq.width());
    let out = model.forward_video(&frames, None)?;
    Ok(out
        .iter()
        .enumerate()
        .map(|(t, o)| predict_instances(&o.attention, h, w, min_area, mode, t as u64))
        .collect())
}

/// Scene-completion error of a LiDAR model on one sequence: each
/// normalized front view loses `drop` of its valid pixels, and the model's
/// output is scored on exactly those pixels. Returns `(model_sse,
/// baseline_sse, values)`, where the baseline predicts the per-channel mean
/// of the pixels that were kept.
pub fn completion_error<T: Scalar>(
    model: &SlotModel<T>,
    seq: &Sequence,
    stats: &ChannelStats<T>,
    drop: f64,
    seed: u64,
) -> Result<(f64, f64, usize), DistillError> {
    let (mut inputs, mut records, mut originals) = (Vec::new(), Vec::new(), Vec::new());
    for (t, fv) in seq.front_views.iter().enumerate() {
        let n = normalize_front_view(&fv.cast::<T>(), stats).map_err(|e| DistillError::Config(e.to_string()))?;
        let (dropped, rec) = drop_points(&n, drop, mix_seed(seed, t as u64)).map_err(|e| DistillError::Config(e.to_string()))?;
        inputs.push(dropped.to_tensor());
        records.push((rec, dropped));
        originals.push(n.to_tensor());
    }
    let out = model.forward_video(&inputs, None)?;
    let (mut sse, mut base, mut count) = (0.0, 0.0, 0);
    for ((o, (rec, kept)), orig) in out.iter().zip(&records).zip(&originals) {
        let c = orig.shape()[2];
        let w = orig.shape()[1];
        let mut mean = vec![0.0; c];
        let kept_px: Vec<usize> = kept.valid_mask().iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        for &i in &kept_px {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += orig.data()[i * c + ch].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= kept_px.len().max(1) as f64);
        for &(r, col) in &rec.dropped {
            let i = r * w + col;
            for (ch, m) in mean.iter().enumerate() {
                let y = orig.data()[i * c + ch].as_f64();
                sse += (o.decoded.data()[i * c + ch].as_f64() - y).powi(2);
                base += (m - y).powi(2);
                count += 1;
            }
        }
    }
    Ok((sse, base, count))
}
