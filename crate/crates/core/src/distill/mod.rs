//! Burn-in and cross-modal distillation over two teacher-student pairs.
//!
//! Each step trains the RGB and LiDAR students on augmented views of the
//! same clips. During distillation the EMA teachers run on the clean
//! inputs, and each teacher's binarized regions supervise the student of
//! the *other* modality after alignment with that student's augmentation.
//! Teachers are only ever written by [`ema_update`].

mod augment;
mod objective;
mod optim;
mod trainer;

pub use augment::{
    align_candidates, align_mask, align_targets, apply_front_view, apply_rgb, augment, AugmentConfig, AugmentError, AugmentInput,
    AugmentRecord, CropWindow, PhotoOp,
};
pub use objective::{
    assemble_loss, branch_loss, forward_branch, plan_targets, Assignment, BranchForward, BranchInput, BranchLoss, Plan, ReconTarget,
    Target,
};
pub use optim::{clip_grad_norm, Adam, CosineSchedule};
pub use trainer::{
    completion_error, load_model, load_state, model_inputs, predict_sequence, save_state, stats_from_meta, Trainer, CHECKPOINT_FILES,
};

use std::fmt::Write as _;

use crate::losses::{LossError, LossTerm, LossWeights, Modality, Phase, TargetSource};
use crate::pcproj::{drop_points, ChannelStats, FrontViewImage};
use crate::pseudolabel::{extract_candidates, filter_motion_masks, Candidate, MaskSet, PseudoError};
use crate::scalar::Scalar;
use crate::slotcore::{Graph, ModelConfig, ModelParams, SlotError, SlotModel};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("parameter layouts differ: {0}")]
    Layout(String),
    #[error("keep rate {0} outside [0, 1)")]
    KeepRate(f64),
    #[error("step {step} needs phase {expected}, state is in {found}")]
    Phase { step: u64, expected: Phase, found: Phase },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error(transparent)]
    Model(#[from] SlotError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `θ_T′ = keep·θ_T + (1 − keep)·θ_S`, elementwise.
pub fn ema_update<T: Scalar>(
    teacher: &ModelParams<T>,
    student: &ModelParams<T>,
    keep_rate: f64,
) -> Result<ModelParams<T>, DistillError> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, keep_rate)?;
    Ok(out)
}

pub fn ema_update_in_place<T: Scalar>(
    teacher: &mut ModelParams<T>,
    student: &ModelParams<T>,
    keep_rate: f64,
) -> Result<(), DistillError> {
    if !(0.0..1.0).contains(&keep_rate) {
        return Err(DistillError::KeepRate(keep_rate));
    }
    if !teacher.same_layout(student) {
        return Err(DistillError::Layout("teacher and student".into()));
    }
    let (a, b) = (T::lit(keep_rate), T::lit(1.0 - keep_rate));
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// FNV-1a over the little-endian bytes of every parameter.
pub fn params_checksum<T: Scalar>(p: &ModelParams<T>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in p.flat() {
        for byte in v.as_f64().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// SplitMix64 finalizer over two words; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Teacher and student of one modality with the student's optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<T> {
    pub modality: Modality,
    pub teacher: SlotModel<T>,
    pub student: SlotModel<T>,
    pub optim: Adam<T>,
}

impl<T: Scalar> ModelPair<T> {
    /// Teacher starts as a copy of the student.
    pub fn new(modality: Modality, student: SlotModel<T>) -> Self {
        Self {
            modality,
            teacher: student.clone(),
            optim: Adam::new(&student.params),
            student,
        }
    }
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub model_2d: ModelConfig,
    pub model_3d: ModelConfig,
    pub batch_size: usize,
    pub clip_len: usize,
    pub burn_in_steps: u64,
    pub distill_steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub keep_rate: f64,
    /// Scene completion on the LiDAR branch; off for dense-depth data.
    pub completion: bool,
    pub completion_drop: f64,
    pub aug_2d: AugmentConfig,
    pub aug_3d: AugmentConfig,
    pub min_area: usize,
    pub conf_threshold: f64,
    /// Teacher candidates overlapping a motion target at least this much
    /// (IoU) are dropped as duplicates.
    pub dedup_iou: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_2d: ModelConfig::new(3),
            model_3d: ModelConfig::new(4),
            batch_size: 1,
            clip_len: 5,
            burn_in_steps: 2000,
            distill_steps: 2000,
            lr: 4e-4,
            warmup_steps: 100,
            lr_floor: 0.05,
            grad_clip: 1.0,
            keep_rate: 0.996,
            completion: true,
            completion_drop: 0.2,
            aug_2d: AugmentConfig::rgb_default(),
            aug_3d: AugmentConfig::lidar_default(),
            min_area: crate::pseudolabel::DEFAULT_MIN_AREA,
            conf_threshold: crate::pseudolabel::DEFAULT_CONF_THRESHOLD,
            dedup_iou: 0.5,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::Config(m));
        self.model_2d.validate()?;
        self.model_3d.validate()?;
        if self.model_2d.in_channels != 3 || self.model_3d.in_channels != 4 {
            return bad("2D model takes 3 channels and 3D model takes 4".into());
        }
        if self.batch_size == 0 || self.clip_len == 0 {
            return bad("batch_size and clip_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.keep_rate) {
            return Err(DistillError::KeepRate(self.keep_rate));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.lr_floor) || !(self.grad_clip >= 0.0) {
            return bad("lr, lr_floor or grad_clip out of range".into());
        }
        if !(0.0..=1.0).contains(&self.completion_drop) || !(0.0..=1.0).contains(&self.dedup_iou) {
            return bad("completion_drop and dedup_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base: self.lr,
            warmup: self.warmup_steps,
            total: self.burn_in_steps + self.distill_steps,
            floor: self.lr_floor,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.burn_in_steps + self.distill_steps
    }
}

/// All four models plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub pair2d: ModelPair<T>,
    pub pair3d: ModelPair<T>,
    pub phase: Phase,
    pub step: u64,
    pub keep_rate: f64,
    pub rng_seed: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self, DistillError> {
        cfg.validate()?;
        let s2 = SlotModel::init(cfg.model_2d.clone(), mix_seed(cfg.seed, 2))?;
        let s3 = SlotModel::init(cfg.model_3d.clone(), mix_seed(cfg.seed, 3))?;
        Ok(Self {
            pair2d: ModelPair::new(Modality::Rgb, s2),
            pair3d: ModelPair::new(Modality::Lidar, s3),
            phase: if cfg.burn_in_steps > 0 { Phase::BurnIn } else { Phase::Distill },
            step: 0,
            keep_rate: cfg.keep_rate,
            rng_seed: cfg.seed,
        })
    }

    pub fn pair(&self, m: Modality) -> &ModelPair<T> {
        match m {
            Modality::Rgb => &self.pair2d,
            Modality::Lidar => &self.pair3d,
        }
    }

    fn pair_mut(&mut self, m: Modality) -> &mut ModelPair<T> {
        match m {
            Modality::Rgb => &mut self.pair2d,
            Modality::Lidar => &mut self.pair3d,
        }
    }
}

/// Unaugmented clip at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T> {
    /// `[H, W, 3]` frames in `[0, 1]`.
    pub rgb: Vec<Tensor<T>>,
    /// Min-max normalized front views.
    pub front_views: Vec<FrontViewImage<T>>,
    /// 2D motion masks per frame.
    pub motion: Vec<MaskSet>,
}

impl<T: Scalar> Clip<T> {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.rgb[0].shape()[0], self.rgb[0].shape()[1])
    }

    fn check(&self) -> Result<(), DistillError> {
        let n = self.len();
        if n == 0 || self.front_views.len() != n || self.motion.len() != n {
            return Err(DistillError::Batch("clip streams differ in length or are empty".into()));
        }
        let (h, w) = self.size();
        let ok = self.rgb.iter().all(|f| f.shape() == [h, w, 3])
            && self.front_views.iter().all(|f| (f.height(), f.width()) == (h, w))
            && self.motion.iter().all(|m| (m.height, m.width) == (h, w));
        if !ok {
            return Err(DistillError::Batch("clip frames differ in size".into()));
        }
        Ok(())
    }
}

/// Clips shared by both branches in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub clips: Vec<Clip<T>>,
}

impl<T: Scalar> Batch<T> {
    fn check(&self) -> Result<(usize, (usize, usize)), DistillError> {
        let first = self.clips.first().ok_or_else(|| DistillError::Batch("empty batch".into()))?;
        for c in &self.clips {
            c.check()?;
            if c.len() != first.len() || c.size() != first.size() {
                return Err(DistillError::Batch("clips differ in length or size".into()));
            }
        }
        Ok((first.len(), first.size()))
    }
}

/// Per-branch outcome of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchReport {
    pub modality: Modality,
    /// `(term, value, pairs or frames)`.
    pub terms: Vec<(LossTerm, f64, usize)>,
    pub total: f64,
    pub grad_norm: f64,
}

impl BranchReport {
    pub fn value(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == term).map(|t| t.1)
    }

    pub fn count(&self, term: LossTerm) -> usize {
        self.terms.iter().find(|t| t.0 == term).map_or(0, |t| t.2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub rgb: BranchReport,
    pub lidar: BranchReport,
    /// Candidates emitted by the 2D and 3D teachers before alignment.
    pub candidates: (usize, usize),
}

/// Fixed loss-log columns.
pub const LOG_HEADER: &str = "step,phase,lr,motion_2d,recon_2d,bg_2d,dist_3d_to_2d,n_dist_3d_to_2d,total_2d,\
motion_3d,completion_3d,bg_3d,dist_2d_to_3d,n_dist_2d_to_3d,total_3d,candidates_2d,candidates_3d";

impl StepReport {
    pub fn csv_row(&self) -> String {
        let d32 = LossTerm::Distill {
            from: Modality::Lidar,
            to: Modality::Rgb,
        };
        let d23 = LossTerm::Distill {
            from: Modality::Rgb,
            to: Modality::Lidar,
        };
        let v = |r: &BranchReport, t| r.value(t).unwrap_or(0.0);
        let mut s = String::new();
        write!(
            s,
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{},{}",
            self.step,
            self.phase,
            self.lr,
            v(&self.rgb, LossTerm::Motion),
            v(&self.rgb, LossTerm::Reconstruction),
            v(&self.rgb, LossTerm::Background),
            v(&self.rgb, d32),
            self.rgb.count(d32),
            self.rgb.total,
            v(&self.lidar, LossTerm::Motion),
            v(&self.lidar, LossTerm::Completion),
            v(&self.lidar, LossTerm::Background),
            v(&self.lidar, d23),
            self.lidar.count(d23),
            self.lidar.total,
            self.candidates.0,
            self.candidates.1
        )
        .unwrap();
        s
    }
}

/// Step-local seeds; everything random in a step derives from these.
struct StepSeeds {
    base: u64,
}

impl StepSeeds {
    fn new(run: u64, step: u64) -> Self {
        Self {
            base: mix_seed(run, step),
        }
    }

    fn augment(&self, m: Modality, clip: usize) -> u64 {
        mix_seed(mix_seed(self.base, 0x100 + m as u64), clip as u64)
    }

    fn completion(&self, clip: usize, frame: usize) -> u64 {
        mix_seed(mix_seed(self.base, 0x200), (clip * 1_000 + frame) as u64)
    }
}

/// Student inputs and the augmentation records that produced them.
struct Prepared<T> {
    input2d: BranchInput<T>,
    input3d: BranchInput<T>,
    rec2d: Vec<AugmentRecord>,
    rec3d: Vec<AugmentRecord>,
}

fn prepare<T: Scalar>(batch: &Batch<T>, cfg: &TrainConfig, seeds: &StepSeeds) -> Result<Prepared<T>, DistillError> {
    let (steps, (h, w)) = batch.check()?;
    let mut rgb = Vec::new();
    let mut fv_in = Vec::new();
    let mut fv_target = Vec::new();
    let mut fv_valid = Vec::new();
    let (mut targets2d, mut targets3d) = (Vec::new(), Vec::new());
    let (mut rec2d, mut rec3d) = (Vec::new(), Vec::new());
    for (i, clip) in batch.clips.iter().enumerate() {
        let r2 = AugmentRecord::sample(&cfg.aug_2d, Modality::Rgb, h, w, seeds.augment(Modality::Rgb, i));
        let r3 = AugmentRecord::sample(&cfg.aug_3d, Modality::Lidar, h, w, seeds.augment(Modality::Lidar, i));
        for t in 0..steps {
            rgb.push(apply_rgb(&clip.rgb[t], &r2)?);
            let fv = apply_front_view(&clip.front_views[t], &r3, t as u64)?;
            if cfg.completion {
                let (dropped, _) = drop_points(&fv, cfg.completion_drop, seeds.completion(i, t)).expect("validated drop ratio");
                fv_in.push(dropped.to_tensor());
                fv_valid.extend_from_slice(fv.valid_mask());
                fv_target.push(fv.to_tensor());
            } else {
                fv_in.push(fv.to_tensor());
            }
            let m2 = align_targets(&clip.motion[t], &r2)?;
            targets2d.push(motion_targets(&m2, TargetSource::Motion2D));
            let m3 = filter_motion_masks(&clip.motion[t], &clip.front_views[t])?;
            targets3d.push(motion_targets(&align_targets(&m3, &r3)?, TargetSource::Motion3D));
        }
        rec2d.push(r2);
        rec3d.push(r3);
    }
    let stack = |v: &[Tensor<T>]| Tensor::stack(v).map_err(|e| DistillError::Batch(e.to_string()));
    let frames2d = stack(&rgb)?;
    let input2d = BranchInput {
        modality: Modality::Rgb,
        reconstruction: Some(ReconTarget {
            target: frames2d.clone(),
            valid: vec![true; rgb.len() * h * w],
        }),
        frames: frames2d,
        batch: batch.clips.len(),
        steps,
        targets: targets2d,
    };
    let reconstruction = if cfg.completion {
        Some(ReconTarget {
            target: stack(&fv_target)?,
            valid: fv_valid,
        })
    } else {
        None
    };
    let input3d = BranchInput {
        modality: Modality::Lidar,
        frames: stack(&fv_in)?,
        batch: batch.clips.len(),
        steps,
        reconstruction,
        targets: targets3d,
    };
    Ok(Prepared {
        input2d,
        input3d,
        rec2d,
        rec3d,
    })
}

fn motion_targets(set: &MaskSet, source: TargetSource) -> Vec<Target> {
    set.masks
        .iter()
        .map(|m| Target {
            mask: m.clone(),
            confidence: None,
            source,
        })
        .collect()
}

/// Candidates of a teacher on one clean clip, per frame, at input
/// resolution.
pub fn teacher_candidates<T: Scalar>(
    teacher: &SlotModel<T>,
    frames: &[Tensor<T>],
    min_area: usize,
    conf_threshold: f64,
) -> Result<Vec<Vec<Candidate>>, DistillError> {
    let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
    let out = teacher.forward_video(frames, None)?;
    Ok(out
        .iter()
        .map(|o| extract_candidates(&o.attention.resize(h, w), min_area, conf_threshold))
        .collect())
}

/// Appends aligned teacher candidates of the other modality to a student's
/// targets, most confident first, skipping duplicates of motion targets.
fn add_candidates(
    targets: &mut [Vec<Target>],
    cands: &[Vec<Vec<Candidate>>],
    recs: &[AugmentRecord],
    source: TargetSource,
    dedup_iou: f64,
) -> Result<(), DistillError> {
    let steps = cands.first().map_or(0, Vec::len);
    for (b, clip) in cands.iter().enumerate() {
        for (t, frame) in clip.iter().enumerate() {
            let mut aligned = align_candidates(frame, &recs[b])?;
            aligned.sort_by(|x, y| y.confidence.total_cmp(&x.confidence));
            let list = &mut targets[b * steps + t];
            let motion: Vec<_> = list.iter().map(|x| x.mask.clone()).collect();
            for c in aligned {
                if c.mask.is_empty() || motion.iter().any(|m| m.iou(&c.mask) >= dedup_iou) {
                    continue;
                }
                list.push(Target {
                    mask: c.mask,
                    confidence: Some(c.confidence),
                    source,
                });
            }
        }
    }
    Ok(())
}

fn teacher_frames<T: Scalar>(clip: &Clip<T>, m: Modality) -> Vec<Tensor<T>> {
    match m {
        Modality::Rgb => clip.rgb.clone(),
        Modality::Lidar => clip.front_views.iter().map(FrontViewImage::to_tensor).collect(),
    }
}

/// Gradient step for one student; returns its report.
fn optimize<T: Scalar>(
    pair: &mut ModelPair<T>,
    input: &BranchInput<T>,
    phase: Phase,
    weights: &LossWeights,
    lr: f64,
    grad_clip: f64,
    step: u64,
) -> Result<BranchReport, DistillError> {
    let (grads, report) = {
        let mut g = Graph::new(&pair.student.params);
        let (loss, _plan) = branch_loss(&pair.student, &mut g, input, phase, weights).map_err(|e| match e {
            DistillError::Pseudo(PseudoError::NonFiniteCost) => DistillError::NonFinite {
                what: format!("{} attention", input.modality),
                step,
            },
            e => e,
        })?;
        let total = g.value(loss.total).data()[0].as_f64();
        if !total.is_finite() {
            return Err(DistillError::NonFinite {
                what: format!("{} loss", input.modality),
                step,
            });
        }
        let terms = loss.terms.iter().map(|&(t, v, n)| (t, g.value(v).data()[0].as_f64(), n)).collect();
        let grads = g.backward(loss.total).map_err(|e| match e {
            SlotError::NonFiniteGradient(p) => DistillError::NonFinite {
                what: format!("gradient of {p}"),
                step,
            },
            e => e.into(),
        })?;
        (
            grads,
            BranchReport {
                modality: input.modality,
                terms,
                total,
                grad_norm: 0.0,
            },
        )
    };
    let mut grads = grads;
    let grad_norm = clip_grad_norm(&mut grads, grad_clip);
    pair.optim.step(&mut pair.student.params, &grads, lr);
    if let Some(i) = pair.student.params.tensors().iter().position(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(DistillError::NonFinite {
            what: format!("{} parameter {}", input.modality, pair.student.params.names()[i]),
            step,
        });
    }
    Ok(BranchReport { grad_norm, ..report })
}

fn run_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<StepReport, DistillError> {
    if state.phase != phase {
        return Err(DistillError::Phase {
            step: state.step,
            expected: phase,
            found: state.phase,
        });
    }
    let seeds = StepSeeds::new(state.rng_seed, state.step);
    let mut prep = prepare(batch, cfg, &seeds)?;
    let mut candidates = (0, 0);
    if phase == Phase::Distill {
        let mut from2d = Vec::new();
        let mut from3d = Vec::new();
        for clip in &batch.clips {
            from2d.push(teacher_candidates(
                &state.pair2d.teacher,
                &teacher_frames(clip, Modality::Rgb),
                cfg.min_area,
                cfg.conf_threshold,
            )?);
            from3d.push(teacher_candidates(
                &state.pair3d.teacher,
                &teacher_frames(clip, Modality::Lidar),
                cfg.min_area,
                cfg.conf_threshold,
            )?);
        }
        let count = |c: &[Vec<Vec<Candidate>>]| c.iter().flatten().map(Vec::len).sum::<usize>();
        candidates = (count(&from2d), count(&from3d));
        add_candidates(&mut prep.input3d.targets, &from2d, &prep.rec3d, TargetSource::Teacher2D, cfg.dedup_iou)?;
        add_candidates(&mut prep.input2d.targets, &from3d, &prep.rec2d, TargetSource::Teacher3D, cfg.dedup_iou)?;
    }
    let lr = cfg.schedule().lr(state.step);
    let step = state.step;
    let rgb = optimize(state.pair_mut(Modality::Rgb), &prep.input2d, phase, &cfg.weights, lr, cfg.grad_clip, step)?;
    let lidar = optimize(state.pair_mut(Modality::Lidar), &prep.input3d, phase, &cfg.weights, lr, cfg.grad_clip, step)?;
    for m in [Modality::Rgb, Modality::Lidar] {
        let keep = state.keep_rate;
        let pair = state.pair_mut(m);
        ema_update_in_place(&mut pair.teacher.params, &pair.student.params, keep)?;
    }
    state.step += 1;
    Ok(StepReport {
        step,
        phase,
        lr,
        rgb,
        lidar,
        candidates,
    })
}

/// Motion-supervised step: each student on its own branch losses, then
/// EMA teacher updates. No information crosses modalities.
pub fn burn_in_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<StepReport, DistillError> {
    run_step(state, batch, cfg, Phase::BurnIn)
}

/// Burn-in losses plus teacher candidates routed across modalities.
pub fn distill_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<StepReport, DistillError> {
    run_step(state, batch, cfg, Phase::Distill)
}

/// Normalization statistics of raw front views; a constant channel gets a
/// unit range so normalization stays defined.
pub fn front_view_stats<'a, T: Scalar + 'a>(views: impl IntoIterator<Item = &'a FrontViewImage<T>>) -> Option<ChannelStats<T>> {
    let mut s = ChannelStats::from_images(views)?;
    for ch in 0..4 {
        if !(s.max[ch] > s.min[ch]) {
            s.max[ch] = s.min[ch] + T::one();
        }
    }
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(v: &[f64]) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::from_vec(&[v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn ema_formula() {
        let t = ema_update(&params(&[1.0]), &params(&[0.0]), 0.996).unwrap();
        assert!((t.get("x").unwrap().data()[0] - 0.996).abs() < 1e-15);
        let same = params(&[0.3, -2.0]);
        assert_eq!(ema_update(&same, &same, 0.5).unwrap(), same);
    }

    #[test]
    fn ema_rejects_bad_inputs() {
        assert!(matches!(ema_update(&params(&[1.0]), &params(&[1.0]), 1.0), Err(DistillError::KeepRate(_))));
        assert!(matches!(
            ema_update(&params(&[1.0]), &params(&[1.0, 2.0]), 0.5),
            Err(DistillError::Layout(_))
        ));
    }

    #[test]
    fn seeds_are_spread() {
        let a: Vec<u64> = (0..100).map(|i| mix_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(mix_seed(1, 2), mix_seed(2, 1));
    }
}
