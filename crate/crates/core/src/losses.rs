//! Training objectives and their analytic derivatives.
//!
//! Each loss is a pure function over flat buffers; the autograd graph in
//! [`crate::slotcore`] wraps them as nodes and calls the matching `*_grad`
//! function during the backward pass.

use std::collections::BTreeMap;
use std::fmt;

use crate::scalar::Scalar;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("completion loss needs at least one valid pixel")]
    EmptyValidSet,
    #[error("intra-modal distillation term {0} is not allowed")]
    IntraModal(LossTerm),
    #[error("term {term} is not allowed in the {phase} phase")]
    WrongPhase { term: LossTerm, phase: Phase },
    #[error("term {term} does not belong to the {branch} branch")]
    WrongBranch { term: LossTerm, branch: Modality },
}

/// Input modality of a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// RGB frames.
    Rgb,
    /// Front-view projected point clouds.
    Lidar,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Lidar,
            Modality::Lidar => Modality::Rgb,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "2d",
            Modality::Lidar => "3d",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    BurnIn,
    Distill,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::BurnIn => "burn_in",
            Phase::Distill => "distill",
        })
    }
}

/// Where a supervision mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetSource {
    Motion2D,
    Motion3D,
    Teacher2D,
    Teacher3D,
}

impl TargetSource {
    pub fn modality(self) -> Modality {
        match self {
            TargetSource::Motion2D | TargetSource::Teacher2D => Modality::Rgb,
            TargetSource::Motion3D | TargetSource::Teacher3D => Modality::Lidar,
        }
    }

    pub fn is_teacher(self) -> bool {
        matches!(self, TargetSource::Teacher2D | TargetSource::Teacher3D)
    }
}

/// A binary mask on the attention grid with its confidence weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTarget<T> {
    pub mask: Vec<T>,
    pub confidence: T,
    pub source: TargetSource,
}

fn clamp_prob<T: Scalar>(w: T) -> T {
    let eps = T::lit(PROB_EPS);
    w.max(eps).min(T::one() - eps)
}

fn check_len(a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::Length { left: a, right: b });
    }
    Ok(())
}

/// Confidence-weighted BCE between a binary mask and an attention map:
/// `-(1/N) Σ [(1+s)·m·log W + (1-m)·log(1-W)]`.
pub fn weighted_bce<T: Scalar>(mask: &[T], w: &[T], s: T) -> Result<T, LossError> {
    check_len(mask.len(), w.len())?;
    if w.is_empty() {
        return Ok(T::zero());
    }
    let one = T::one();
    let mut acc = T::zero();
    for (&m, &p) in mask.iter().zip(w) {
        let p = clamp_prob(p);
        acc += (one + s) * m * p.ln() + (one - m) * (one - p).ln();
    }
    Ok(-acc / T::lit(w.len() as f64))
}

/// `∂ weighted_bce / ∂ W`; zero where the clamp is active.
pub fn weighted_bce_grad<T: Scalar>(mask: &[T], w: &[T], s: T) -> Vec<T> {
    let one = T::one();
    let eps = T::lit(PROB_EPS);
    let n = T::lit(w.len().max(1) as f64);
    mask.iter()
        .zip(w)
        .map(|(&m, &p)| {
            if p < eps || p > one - eps {
                return T::zero();
            }
            -((one + s) * m / p - (one - m) / (one - p)) / n
        })
        .collect()
}

/// `∂ weighted_bce / ∂ s = -(1/N) Σ m·log W`.
pub fn weighted_bce_grad_confidence<T: Scalar>(mask: &[T], w: &[T]) -> T {
    let n = T::lit(w.len().max(1) as f64);
    -mask.iter().zip(w).map(|(&m, &p)| m * clamp_prob(p).ln()).sum::<T>() / n
}

/// Scene-completion MSE restricted to valid pixels:
/// `(1/|P|) Σ_{P} ‖Î − I‖² / C`.
pub fn completion_mse<T: Scalar>(pred: &[T], target: &[T], valid: &[bool], channels: usize) -> Result<T, LossError> {
    check_len(pred.len(), target.len())?;
    check_len(pred.len(), valid.len() * channels)?;
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(LossError::EmptyValidSet);
    }
    let mut acc = T::zero();
    for (idx, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for c in 0..channels {
            let d = pred[idx * channels + c] - target[idx * channels + c];
            acc += d * d;
        }
    }
    Ok(acc / T::lit((count * channels) as f64))
}

pub fn completion_mse_grad<T: Scalar>(pred: &[T], target: &[T], valid: &[bool], channels: usize) -> Vec<T> {
    let count = valid.iter().filter(|&&v| v).count().max(1);
    let scale = T::lit(2.0 / (count * channels) as f64);
    let mut g = vec![T::zero(); pred.len()];
    for (idx, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for c in 0..channels {
            let o = idx * channels + c;
            g[o] = scale * (pred[o] - target[o]);
        }
    }
    g
}

/// Background NLL: the background map should be 1 off the covered pixels
/// and 0 on them.
pub fn background_nll<T: Scalar>(w_bg: &[T], covered: &[T]) -> Result<T, LossError> {
    check_len(w_bg.len(), covered.len())?;
    if w_bg.is_empty() {
        return Ok(T::zero());
    }
    let one = T::one();
    let mut acc = T::zero();
    for (&p, &c) in w_bg.iter().zip(covered) {
        let p = clamp_prob(p);
        acc += (one - c) * p.ln() + c * (one - p).ln();
    }
    Ok(-acc / T::lit(w_bg.len() as f64))
}

pub fn background_nll_grad<T: Scalar>(w_bg: &[T], covered: &[T]) -> Vec<T> {
    let one = T::one();
    let eps = T::lit(PROB_EPS);
    let n = T::lit(w_bg.len().max(1) as f64);
    w_bg.iter()
        .zip(covered)
        .map(|(&p, &c)| {
            if p < eps || p > one - eps {
                return T::zero();
            }
            -((one - c) / p - c / (one - p)) / n
        })
        .collect()
}

/// Labeled loss terms that may enter a branch objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    Motion,
    /// RGB reconstruction (2D branch).
    Reconstruction,
    /// Scene completion (3D branch).
    Completion,
    Background,
    /// Teacher pseudo-labels from `from` supervising a student of `to`.
    Distill { from: Modality, to: Modality },
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossTerm::Motion => f.write_str("motion"),
            LossTerm::Reconstruction => f.write_str("recon"),
            LossTerm::Completion => f.write_str("completion"),
            LossTerm::Background => f.write_str("bg"),
            LossTerm::Distill { from, to } => write!(f, "dist_{from}_to_{to}"),
        }
    }
}

/// Per-term weights; missing terms weigh 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossWeights(pub BTreeMap<LossTerm, f64>);

impl LossWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        self.0.get(&term).copied().unwrap_or(1.0)
    }
}

/// Checks that `term` may appear in a `branch` objective during `phase`.
pub fn validate_term(branch: Modality, phase: Phase, term: LossTerm) -> Result<(), LossError> {
    match term {
        LossTerm::Distill { from, to } => {
            if from == to {
                return Err(LossError::IntraModal(term));
            }
            if phase == Phase::BurnIn {
                return Err(LossError::WrongPhase { term, phase });
            }
            if to != branch {
                return Err(LossError::WrongBranch { term, branch });
            }
        }
        LossTerm::Reconstruction if branch == Modality::Lidar => {
            return Err(LossError::WrongBranch { term, branch });
        }
        LossTerm::Completion if branch == Modality::Rgb => {
            return Err(LossError::WrongBranch { term, branch });
        }
        _ => {}
    }
    Ok(())
}

/// Weighted sum of labeled loss terms for one branch.
pub fn total_loss<T: Scalar>(
    branch: Modality,
    phase: Phase,
    parts: &[(LossTerm, T)],
    weights: &LossWeights,
) -> Result<T, LossError> {
    let mut acc = T::zero();
    for &(term, value) in parts {
        validate_term(branch, phase, term)?;
        acc += T::lit(weights.get(term)) * value;
    }
    Ok(acc)
}

/// Maps a target source to the loss term it feeds on a given branch.
pub fn term_for_source(branch: Modality, source: TargetSource) -> LossTerm {
    if source.is_teacher() {
        LossTerm::Distill {
            from: source.modality(),
            to: branch,
        }
    } else {
        LossTerm::Motion
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_hand_value() {
        let l = weighted_bce(&[1.0, 0.0], &[0.8, 0.2], 0.5).unwrap();
        let expect = -0.5 * (1.5 * 0.8f64.ln() + 0.8f64.ln());
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.278_929_439_1).abs() < 1e-9);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let eps = PROB_EPS;
        let m = [1.0, 0.0, 1.0];
        let w = [1.0, 0.0, 1.0];
        for s in [0.0, 0.5, 1.0] {
            let l = weighted_bce(&m, &w, s).unwrap();
            assert!(l <= -(1.0f64 - eps).ln() * (1.0 + s) + 1e-15);
            assert!(l < 2.1e-7);
        }
    }

    #[test]
    fn bce_zero_confidence_is_plain_bce() {
        let m = [1.0, 0.0, 1.0, 0.0];
        let w = [0.3, 0.6, 0.9, 0.1];
        let plain: f64 = -m.iter().zip(&w).map(|(&m, &p): (&f64, &f64)| m * p.ln() + (1.0 - m) * (1.0 - p).ln()).sum::<f64>() / 4.0;
        assert!((weighted_bce(&m, &w, 0.0).unwrap() - plain).abs() < 1e-15);
    }

    #[test]
    fn bce_length_mismatch() {
        assert_eq!(
            weighted_bce(&[1.0f64], &[0.5, 0.5], 0.0),
            Err(LossError::Length { left: 1, right: 2 })
        );
    }

    #[test]
    fn completion_examples() {
        let t = [1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0];
        assert_eq!(completion_mse(&t, &t, &[true, false], 4).unwrap(), 0.0);
        let p = [2.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(completion_mse(&p, &t, &[true, false], 4).unwrap(), 0.25);
        assert_eq!(completion_mse(&p, &t, &[false, false], 4), Err(LossError::EmptyValidSet));
    }

    #[test]
    fn background_examples() {
        let l = background_nll(&[0.5; 4], &[1.0; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let covered = [1.0, 0.0, 1.0];
        let w_bg: Vec<f64> = covered.iter().map(|c| 1.0 - c).collect();
        assert!(background_nll(&w_bg, &covered).unwrap() < 2e-7);
        // Same as BCE with s = 0 and the complement mask.
        let w = [0.2, 0.7, 0.4];
        let flipped: Vec<f64> = covered.iter().map(|c| 1.0 - c).collect();
        let a = background_nll(&w, &covered).unwrap();
        let b = weighted_bce(&flipped, &w, 0.0).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn total_loss_sums_and_rejects_intra_modal() {
        let w = LossWeights::default();
        let parts = [
            (LossTerm::Motion, 1.0),
            (LossTerm::Completion, 2.0),
            (LossTerm::Background, 0.5),
        ];
        assert_eq!(total_loss(Modality::Lidar, Phase::BurnIn, &parts, &w).unwrap(), 3.5);
        let intra = term_for_source(Modality::Lidar, TargetSource::Teacher3D);
        assert_eq!(
            total_loss(Modality::Lidar, Phase::Distill, &[(intra, 1.0)], &w),
            Err(LossError::IntraModal(intra))
        );
        let zero = LossWeights(parts.iter().map(|&(t, _)| (t, 0.0)).collect());
        assert_eq!(total_loss(Modality::Lidar, Phase::BurnIn, &parts, &zero).unwrap(), 0.0);
        let cross = term_for_source(Modality::Lidar, TargetSource::Teacher2D);
        assert!(total_loss(Modality::Lidar, Phase::BurnIn, &[(cross, 1.0)], &w).is_err());
        assert_eq!(total_loss(Modality::Lidar, Phase::Distill, &[(cross, 1.5)], &w).unwrap(), 1.5);
        assert_eq!(cross.to_string(), "dist_2d_to_3d");
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let m = [1.0, 0.0, 1.0, 0.0, 1.0];
        let w = [0.3, 0.6, 0.9, 0.1, 0.5];
        let s = 0.4f64;
        let g = weighted_bce_grad(&m, &w, s);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w;
            let mut wm = w;
            wp[i] += h;
            wm[i] -= h;
            let fd = (weighted_bce(&m, &wp, s).unwrap() - weighted_bce(&m, &wm, s).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
        let gs = weighted_bce_grad_confidence(&m, &w);
        let fd = (weighted_bce(&m, &w, s + h).unwrap() - weighted_bce(&m, &w, s - h).unwrap()) / (2.0 * h);
        assert!((fd - gs).abs() < 1e-7);
    }
}
