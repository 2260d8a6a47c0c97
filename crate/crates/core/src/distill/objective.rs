//! Per-branch training objective on the autograd tape.
//!
//! Building a loss is split in two so the discrete parts can be frozen:
//! [`plan_targets`] matches targets to slots and fixes confidences from
//! detached values; [`assemble_loss`] turns a plan into differentiable terms.

use std::collections::BTreeMap;

use crate::losses::{term_for_source, validate_term, LossTerm, LossWeights, Modality, Phase, TargetSource};
use crate::pseudolabel::{confidence_score, match_masks, Mask, MaskSet};
use crate::scalar::Scalar;
use crate::slotcore::{AttentionMaps, Graph, SlotError, SlotModel, Var, VideoVars};
use crate::tensor::Tensor;

use super::DistillError;

/// A supervision mask at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub mask: Mask,
    /// Fixed confidence, or `None` to take the mean of the student's own
    /// detached foreground map over the mask.
    pub confidence: Option<f64>,
    pub source: TargetSource,
}

/// Dense reconstruction target `[B·T, H, W, C_out]` with its valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTarget<T> {
    pub target: Tensor<T>,
    pub valid: Vec<bool>,
}

/// One branch's student input for a batch of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInput<T> {
    pub modality: Modality,
    /// `[B·T, H, W, C]`, clip-major.
    pub frames: Tensor<T>,
    pub batch: usize,
    pub steps: usize,
    pub reconstruction: Option<ReconTarget<T>>,
    /// Targets of frame `b·T + t`, in priority order.
    pub targets: Vec<Vec<Target>>,
}

impl<T: Scalar> BranchInput<T> {
    pub fn frame_count(&self) -> usize {
        self.batch * self.steps
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }
}

/// Student forward pass plus attention maps resampled to input resolution.
pub struct BranchForward {
    pub video: VideoVars,
    /// Per frame `[H·W, K (+1)]`.
    pub maps: Vec<Var>,
}

pub fn forward_branch<T: Scalar>(
    model: &SlotModel<T>,
    g: &mut Graph<'_, T>,
    input: &BranchInput<T>,
) -> Result<BranchForward, SlotError> {
    let x = g.input(input.frames.clone());
    let video = model.forward_graph(g, x, input.batch, input.steps, None)?;
    let (h, w) = video.feature_dims;
    let (hh, ww) = input.size();
    let cols = model.config.slot_rows();
    let mut maps = Vec::with_capacity(input.frame_count());
    for b in 0..input.batch {
        for t in 0..input.steps {
            let a = video.attention[b][t];
            let m = if (h, w) == (hh, ww) {
                a
            } else {
                let r = g.reshape(a, &[1, h, w, cols]);
                let r = g.resize(r, hh, ww);
                g.reshape(r, &[hh * ww, cols])
            };
            maps.push(m);
        }
    }
    Ok(BranchForward { video, maps })
}

/// A target bound to a slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub frame: usize,
    pub slot: usize,
    pub mask: Mask,
    pub confidence: f64,
    pub term: LossTerm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub assignments: Vec<Assignment>,
    /// Union of all assigned masks, per frame.
    pub covered: Vec<Mask>,
}

impl Plan {
    pub fn count(&self, term: LossTerm) -> usize {
        self.assignments.iter().filter(|a| a.term == term).count()
    }
}

/// Matches each frame's targets to object slots. At most `K` targets per
/// frame are kept, in the given order; empty masks are skipped. Rejects
/// targets whose loss term is not allowed for this branch and phase.
pub fn plan_targets<T: Scalar>(
    model: &SlotModel<T>,
    g: &Graph<'_, T>,
    fwd: &BranchForward,
    input: &BranchInput<T>,
    phase: Phase,
) -> Result<Plan, DistillError> {
    let (hh, ww) = input.size();
    let k = model.config.num_slots;
    let mut assignments = Vec::new();
    let mut covered = Vec::with_capacity(input.frame_count());
    if input.targets.len() != input.frame_count() {
        return Err(DistillError::Batch(format!(
            "{} target lists for {} frames",
            input.targets.len(),
            input.frame_count()
        )));
    }
    for (f, targets) in input.targets.iter().enumerate() {
        for t in targets {
            validate_term(input.modality, phase, term_for_source(input.modality, t.source))?;
            if (t.mask.height(), t.mask.width()) != (hh, ww) {
                return Err(DistillError::Batch(format!(
                    "target {}x{} for input {hh}x{ww}",
                    t.mask.height(),
                    t.mask.width()
                )));
            }
        }
        let kept: Vec<&Target> = targets.iter().filter(|t| !t.mask.is_empty()).take(k).collect();
        let mut cov = Mask::new(hh, ww);
        if !kept.is_empty() {
            let maps = AttentionMaps::from_matrix(hh, ww, g.value(fwd.maps[f]), model.config.background_slot);
            let set = MaskSet::new(hh, ww, f as u64, kept.iter().map(|t| t.mask.clone()).collect());
            let fg = maps.foreground_map();
            for (i, slot) in match_masks(&set, &maps)? {
                let t = kept[i];
                let confidence = match t.confidence {
                    Some(c) => c,
                    None => confidence_score(&t.mask, &fg)?,
                };
                cov = cov.union(&t.mask);
                assignments.push(Assignment {
                    frame: f,
                    slot,
                    mask: t.mask.clone(),
                    confidence,
                    term: term_for_source(input.modality, t.source),
                });
            }
        }
        covered.push(cov);
    }
    Ok(Plan { assignments, covered })
}

/// Differentiable loss of one branch and its labelled terms.
pub struct BranchLoss {
    pub total: Var,
    /// `(term, value node, number of contributing pairs or frames)`.
    pub terms: Vec<(LossTerm, Var, usize)>,
}

/// Mask terms average over their matched pairs, the background term over
/// frames, and the reconstruction term over frames with valid pixels.
pub fn assemble_loss<T: Scalar>(
    model: &SlotModel<T>,
    g: &mut Graph<'_, T>,
    fwd: &BranchForward,
    input: &BranchInput<T>,
    plan: &Plan,
    phase: Phase,
    weights: &LossWeights,
) -> Result<BranchLoss, DistillError> {
    let mut grouped: BTreeMap<LossTerm, Vec<Var>> = BTreeMap::new();
    for a in &plan.assignments {
        let col = g.column(fwd.maps[a.frame], a.slot);
        let l = g.weighted_bce(col, a.mask.to_values(), T::lit(a.confidence));
        grouped.entry(a.term).or_default().push(l);
    }
    let mut terms = Vec::new();
    for (term, vars) in grouped {
        let n = vars.len();
        let w = T::lit(1.0 / n as f64);
        let v = g.weighted_sum(vars.into_iter().map(|x| (x, w)).collect());
        terms.push((term, v, n));
    }
    if model.config.background_slot {
        let k = model.config.num_slots;
        let n = fwd.maps.len();
        let mut parts = Vec::with_capacity(n);
        for (f, &m) in fwd.maps.iter().enumerate() {
            let col = g.column(m, k);
            parts.push((g.background_nll(col, plan.covered[f].to_values()), T::lit(1.0 / n as f64)));
        }
        terms.push((LossTerm::Background, g.weighted_sum(parts), n));
    }
    if let Some(r) = &input.reconstruction {
        let term = match input.modality {
            Modality::Rgb => LossTerm::Reconstruction,
            Modality::Lidar => LossTerm::Completion,
        };
        let v = g.masked_mse(fwd.video.decoded, r.target.clone(), r.valid.clone());
        terms.push((term, v, input.frame_count()));
    }
    let mut weighted = Vec::with_capacity(terms.len());
    for &(term, v, _) in &terms {
        validate_term(input.modality, phase, term)?;
        weighted.push((v, T::lit(weights.get(term))));
    }
    let total = g.weighted_sum(weighted);
    Ok(BranchLoss { total, terms })
}

/// Forward, plan and assemble in one call; convenient when the plan need
/// not be frozen.
pub fn branch_loss<T: Scalar>(
    model: &SlotModel<T>,
    g: &mut Graph<'_, T>,
    input: &BranchInput<T>,
    phase: Phase,
    weights: &LossWeights,
) -> Result<(BranchLoss, Plan), DistillError> {
    let fwd = forward_branch(model, g, input)?;
    let plan = plan_targets(model, g, &fwd, input, phase)?;
    let loss = assemble_loss(model, g, &fwd, input, &plan, phase, weights)?;
    Ok((loss, plan))
}
