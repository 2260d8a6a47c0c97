//! Instance predictions, late fusion and segmentation metrics.

mod report;

pub use report::{band_index, banded_counts, banded_eval, BandRow, Evaluator, MetricsReport};

use crate::pseudolabel::{binarize_teacher, connected_components, linear_assignment, LabelGrid, Mask, MaskSet};
use crate::scalar::Scalar;
use crate::slotcore::AttentionMaps;

/// Default late-fusion IoU threshold.
pub const DEFAULT_TAU: f64 = 0.3;
/// Default distance bands in metres.
pub const DEFAULT_BANDS: [(f64, f64); 3] = [(0.0, 10.0), (10.0, 30.0), (30.0, 70.0)];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("only {0} pixels in scope, need at least 2")]
    TooFewPixels(usize),
}

/// How slot regions become instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InstanceMode {
    /// One instance per object slot.
    Slots,
    /// One instance per 4-connected region of each slot, the same rule that
    /// turns teacher maps into candidates.
    #[default]
    Components,
}

/// Instance masks from attention maps: bilinear upsampling to
/// `height×width`, per-pixel argmax, then one mask per slot or per slot
/// region, keeping those with at least `min_area` pixels. Masks are
/// pairwise disjoint and ordered by slot, then raster position.
pub fn predict_instances<T: Scalar>(
    maps: &AttentionMaps<T>,
    height: usize,
    width: usize,
    min_area: usize,
    mode: InstanceMode,
    frame_id: u64,
) -> MaskSet {
    let up = if (maps.height, maps.width) == (height, width) {
        maps.clone()
    } else {
        maps.resize(height, width)
    };
    let labels = binarize_teacher(&up);
    let mut masks = Vec::new();
    for id in 1..=maps.num_slots as u16 {
        let region = Mask::from_vec(height, width, labels.labels.iter().map(|&l| l == id).collect());
        match mode {
            InstanceMode::Slots => masks.push(region),
            InstanceMode::Components => masks.extend(connected_components(&region)),
        }
    }
    masks.retain(|m| m.area() >= min_area.max(1));
    MaskSet::new(height, width, frame_id, masks)
}

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings. With `foreground_only` only
/// pixels whose true label is nonzero are scored. Two identical trivial
/// partitions (both one cluster, or both all singletons) score 1.
pub fn ari(pred: &[u16], truth: &[u16], foreground_only: bool) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Shape(format!("{} vs {} labels", pred.len(), truth.len())));
    }
    let pairs: Vec<(u16, u16)> = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| !foreground_only || t > 0)
        .map(|(&p, &t)| (p, t))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(EvalError::TooFewPixels(n));
    }
    let mut table = std::collections::HashMap::<(u16, u16), u64>::new();
    let mut rows = std::collections::HashMap::<u16, u64>::new();
    let mut cols = std::collections::HashMap::<u16, u64>::new();
    for &(p, t) in &pairs {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = a * b / comb2(n as u64);
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Detection counts at one IoU threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, or 0 when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// One-to-one greedy matching by descending IoU among pairs with
/// IoU ≥ `threshold` (ties by prediction then GT index).
pub fn match_counts(pred: &MaskSet, gt: &MaskSet, threshold: f64) -> Result<Counts, EvalError> {
    if !pred.is_empty() && !gt.is_empty() && (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(EvalError::Shape("prediction and ground-truth grids differ".into()));
    }
    let mut pairs = Vec::new();
    for (i, p) in pred.masks.iter().enumerate() {
        for (j, g) in gt.masks.iter().enumerate() {
            let iou = p.iou(g);
            if iou >= threshold && iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    Ok(Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    })
}

/// `(F1, precision, recall)` at an IoU threshold (default 0.5).
pub fn f1_at_iou(pred: &MaskSet, gt: &MaskSet, threshold: f64) -> Result<(f64, f64, f64), EvalError> {
    let c = match_counts(pred, gt, threshold)?;
    Ok((c.f1(), c.precision(), c.recall()))
}

/// Keeps cross-modal pairs with IoU ≥ `tau` as their pixel union; pairs
/// are chosen by an assignment maximizing total eligible IoU. Masks unique
/// to one modality are dropped. Output is ordered by the 2D mask index.
pub fn late_fuse(pred2d: &MaskSet, pred3d: &MaskSet, tau: f64) -> Result<MaskSet, EvalError> {
    if (pred2d.height, pred2d.width) != (pred3d.height, pred3d.width) {
        return Err(EvalError::Shape(format!(
            "{}x{} vs {}x{}",
            pred2d.height, pred2d.width, pred3d.height, pred3d.width
        )));
    }
    let iou: Vec<Vec<f64>> = pred2d
        .masks
        .iter()
        .map(|a| pred3d.masks.iter().map(|b| a.iou(b)).collect())
        .collect();
    let gain = |i: usize, j: usize| if iou[i][j] >= tau && iou[i][j] > 0.0 { iou[i][j] } else { 0.0 };
    let (n2, n3) = (pred2d.len(), pred3d.len());
    let pairs: Vec<(usize, usize)> = if n2 <= n3 {
        let cost: Vec<Vec<f64>> = (0..n2).map(|i| (0..n3).map(|j| -gain(i, j)).collect()).collect();
        linear_assignment(&cost).into_iter().enumerate().collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..n3).map(|j| (0..n2).map(|i| -gain(i, j)).collect()).collect();
        let mut p: Vec<(usize, usize)> = linear_assignment(&cost).into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        p.sort_unstable();
        p
    };
    let masks = pairs
        .into_iter()
        .filter(|&(i, j)| gain(i, j) > 0.0)
        .map(|(i, j)| pred2d.masks[i].union(&pred3d.masks[j]))
        .collect();
    Ok(MaskSet::new(pred2d.height, pred2d.width, pred2d.frame_id, masks))
}

/// Label grid of a prediction (instance `i` → `i + 1`, background 0).
pub fn labels_of(set: &MaskSet) -> LabelGrid {
    LabelGrid::from_masks(set)
}
