//! Motion-mask filtering, mask-to-slot matching and teacher candidates.

mod assign;
mod mask;
mod pgm;

use std::collections::VecDeque;

pub use assign::{assignment_cost, linear_assignment};
pub use mask::{nearest_source, LabelGrid, Mask, MaskSet};
pub use pgm::{decode_label_pgm, encode_label_pgm, read_label_pgm, write_label_pgm};

use crate::losses::PROB_EPS;
use crate::pcproj::FrontViewImage;
use crate::scalar::Scalar;
use crate::slotcore::AttentionMaps;

pub const DEFAULT_MIN_AREA: usize = 16;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.7;

#[derive(Debug, thiserror::Error)]
pub enum PseudoError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{masks} masks cannot be matched to {slots} slots")]
    TooManyMasks { masks: usize, slots: usize },
    #[error("empty mask")]
    EmptyMask,
    #[error("non-finite matching cost")]
    NonFiniteCost,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Connected region of one teacher slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub mask: Mask,
    pub confidence: f64,
    pub source_slot: usize,
}

/// Keeps the masks that touch at least one valid front-view pixel.
pub fn filter_motion_masks<T: Scalar>(masks: &MaskSet, fv: &FrontViewImage<T>) -> Result<MaskSet, PseudoError> {
    if (masks.height, masks.width) != (fv.height(), fv.width()) {
        return Err(PseudoError::Shape(format!(
            "masks {}x{} vs front view {}x{}",
            masks.height,
            masks.width,
            fv.height(),
            fv.width()
        )));
    }
    let mut kept = Vec::new();
    let mut scores = Vec::new();
    for (i, m) in masks.masks.iter().enumerate() {
        if m.pixels().any(|p| fv.is_valid(p / fv.width(), p % fv.width())) {
            kept.push(m.clone());
            if let Some(s) = &masks.scores {
                scores.push(s[i]);
            }
        }
    }
    let mut out = MaskSet::new(masks.height, masks.width, masks.frame_id, kept);
    out.scores = masks.scores.as_ref().map(|_| scores);
    Ok(out)
}

fn check_grid<T: Scalar>(height: usize, width: usize, maps: &AttentionMaps<T>) -> Result<(), PseudoError> {
    if (height, width) != (maps.height, maps.width) {
        return Err(PseudoError::Shape(format!(
            "masks {height}x{width} vs attention {}x{}",
            maps.height, maps.width
        )));
    }
    Ok(())
}

/// Mean clamped BCE between every mask (rows) and every object slot map
/// (columns).
pub fn match_costs<T: Scalar>(masks: &MaskSet, maps: &AttentionMaps<T>) -> Result<Vec<Vec<f64>>, PseudoError> {
    check_grid(masks.height, masks.width, maps)?;
    let n = maps.positions() as f64;
    let k = maps.num_slots;
    Ok(masks
        .masks
        .iter()
        .map(|m| {
            let mut row = vec![0.0; k];
            for (i, w) in maps.slots.chunks_exact(k).enumerate() {
                let pos = m.data()[i];
                for (c, &wv) in row.iter_mut().zip(w) {
                    let p = wv.as_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
                    *c -= if pos { p.ln() } else { (1.0 - p).ln() };
                }
            }
            row.iter_mut().for_each(|c| *c /= n);
            row
        })
        .collect())
}

/// One-to-one `(mask index, slot index)` pairs of minimum total cost.
pub fn match_masks<T: Scalar>(masks: &MaskSet, maps: &AttentionMaps<T>) -> Result<Vec<(usize, usize)>, PseudoError> {
    if masks.len() > maps.num_slots {
        return Err(PseudoError::TooManyMasks {
            masks: masks.len(),
            slots: maps.num_slots,
        });
    }
    let cost = match_costs(masks, maps)?;
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(PseudoError::NonFiniteCost);
    }
    Ok(linear_assignment(&cost).into_iter().enumerate().collect())
}

/// Argmax over `[W | W_bg]` per position; 0 = background, `k + 1` = slot
/// `k`. Ties go to the lowest slot index.
pub fn binarize_teacher<T: Scalar>(maps: &AttentionMaps<T>) -> LabelGrid {
    let k = maps.num_slots;
    let bg = maps.background_map();
    let labels = maps
        .slots
        .chunks_exact(k)
        .zip(&bg)
        .map(|(row, &b)| {
            let (mut best, mut arg) = (row[0], 0);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            if maps.background.is_some() && b > best {
                0
            } else {
                (arg + 1) as u16
            }
        })
        .collect();
    LabelGrid {
        height: maps.height,
        width: maps.width,
        labels,
    }
}

/// 4-connected components, ordered by their first pixel in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Mask> {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in mask.pixels() {
        if seen[start] {
            continue;
        }
        let mut comp = Mask::new(h, w);
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            comp.set(r, c, true);
            let mut visit = |q: usize| {
                if mask.data()[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Mean of `w_fg` over the mask's positive pixels.
pub fn confidence_score<T: Scalar>(mask: &Mask, w_fg: &[T]) -> Result<f64, PseudoError> {
    if w_fg.len() != mask.data().len() {
        return Err(PseudoError::Shape(format!("mask {} vs map {}", mask.data().len(), w_fg.len())));
    }
    let area = mask.area();
    if area == 0 {
        return Err(PseudoError::EmptyMask);
    }
    Ok(mask.pixels().map(|p| w_fg[p].as_f64()).sum::<f64>() / area as f64)
}

/// Connected regions of each binarized slot with area ≥ `min_area` and
/// confidence ≥ `conf_threshold`, ordered by slot then raster position.
pub fn extract_candidates<T: Scalar>(maps: &AttentionMaps<T>, min_area: usize, conf_threshold: f64) -> Vec<Candidate> {
    let labels = binarize_teacher(maps);
    let fg = maps.foreground_map();
    let mut out = Vec::new();
    for k in 0..maps.num_slots {
        let id = (k + 1) as u16;
        let region = Mask::from_vec(maps.height, maps.width, labels.labels.iter().map(|&l| l == id).collect());
        if region.is_empty() {
            continue;
        }
        for comp in connected_components(&region) {
            if comp.area() < min_area.max(1) {
                continue;
            }
            let confidence = confidence_score(&comp, &fg).expect("nonempty component");
            if confidence >= conf_threshold {
                out.push(Candidate {
                    mask: comp,
                    confidence,
                    source_slot: k,
                });
            }
        }
    }
    out
}
