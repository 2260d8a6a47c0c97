//! Brute-force reference implementations used as test oracles. They favour
//! obviousness over speed and are only suitable for tiny inputs.

use crate::pcproj::FrontViewImage;
use crate::pseudolabel::{Mask, MaskSet};
use crate::scalar::Scalar;

/// ARI by explicit enumeration of all pixel pairs (Hubert–Arabie form).
pub fn ari_pairs(pred: &[u16], truth: &[u16], foreground_only: bool) -> f64 {
    let idx: Vec<usize> = (0..truth.len()).filter(|&i| !foreground_only || truth[i] > 0).collect();
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for (x, &i) in idx.iter().enumerate() {
        for &j in &idx[x + 1..] {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let denom = (a + b) * (b + d) + (a + c) * (c + d);
    if denom == 0.0 {
        1.0
    } else {
        2.0 * (a * d - b * c) / denom
    }
}

/// Every injection of `rows` into `cols` columns.
pub fn injections(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    fn go(rows: usize, cols: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == rows {
            out.push(cur.clone());
            return;
        }
        for j in 0..cols {
            if !cur.contains(&j) {
                cur.push(j);
                go(rows, cols, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(rows, cols, &mut Vec::new(), &mut out);
    out
}

/// Minimum total cost over all injections of rows into columns.
pub fn min_assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let cols = cost.first().map_or(0, Vec::len);
    injections(cost.len(), cols)
        .iter()
        .map(|a| a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .min(if cost.is_empty() { 0.0 } else { f64::INFINITY })
}

/// Partial one-to-one matchings: `out[i]` is `Some(j)` or unmatched.
pub fn partial_matchings(rows: usize, cols: usize) -> Vec<Vec<Option<usize>>> {
    fn go(rows: usize, cols: usize, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if cur.len() == rows {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        go(rows, cols, cur, out);
        cur.pop();
        for j in 0..cols {
            if !cur.contains(&Some(j)) {
                cur.push(Some(j));
                go(rows, cols, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(rows, cols, &mut Vec::new(), &mut out);
    out
}

/// IoU by direct pixel counting.
pub fn iou_pixels(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += usize::from(x && y);
            uni += usize::from(x || y);
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// `(F1, precision, recall)` from the matching with the most pairs at
/// IoU ≥ `threshold`, found by exhaustive search.
pub fn f1_exhaustive(pred: &MaskSet, gt: &MaskSet, threshold: f64) -> (f64, f64, f64) {
    let iou: Vec<Vec<f64>> = pred.masks.iter().map(|p| gt.masks.iter().map(|g| iou_pixels(p, g)).collect()).collect();
    let tp = partial_matchings(pred.len(), gt.len())
        .iter()
        .map(|m| {
            m.iter()
                .enumerate()
                .filter(|(i, j)| j.is_some_and(|j| iou[*i][j] >= threshold && iou[*i][j] > 0.0))
                .count()
        })
        .max()
        .unwrap_or(0) as f64;
    let p = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let r = if gt.is_empty() { 0.0 } else { tp / gt.len() as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (f, p, r)
}

/// All outcomes of late fusion that are optimal by total eligible IoU
/// (within `1e-9`), each as unions ordered by 2D index.
pub fn late_fuse_outcomes(pred2d: &MaskSet, pred3d: &MaskSet, tau: f64) -> Vec<Vec<Mask>> {
    let iou: Vec<Vec<f64>> = pred2d.masks.iter().map(|a| pred3d.masks.iter().map(|b| iou_pixels(a, b)).collect()).collect();
    let eligible = |i: usize, j: usize| iou[i][j] >= tau && iou[i][j] > 0.0;
    let scored: Vec<(f64, Vec<Mask>)> = partial_matchings(pred2d.len(), pred3d.len())
        .into_iter()
        .filter(|m| m.iter().enumerate().all(|(i, j)| j.is_none_or(|j| eligible(i, j))))
        .map(|m| {
            let total = m.iter().enumerate().filter_map(|(i, j)| j.map(|j| iou[i][j])).sum::<f64>();
            let masks = m
                .iter()
                .enumerate()
                .filter_map(|(i, j)| {
                    j.map(|j| {
                        let (a, b) = (&pred2d.masks[i], &pred3d.masks[j]);
                        Mask::from_fn(a.height(), a.width(), |r, c| a.get(r, c) || b.get(r, c))
                    })
                })
                .collect();
            (total, masks)
        })
        .collect();
    let best = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    scored.into_iter().filter(|s| s.0 >= best - 1e-9).map(|s| s.1).collect()
}

/// Motion-mask filter by scanning every pixel against the explicit valid set.
pub fn filter_scan<T: Scalar>(masks: &MaskSet, fv: &FrontViewImage<T>) -> Vec<usize> {
    let valid = fv.valid_set();
    (0..masks.len())
        .filter(|&k| {
            let m = &masks.masks[k];
            (0..m.height()).any(|r| (0..m.width()).any(|c| m.get(r, c) && valid.contains(&(r, c))))
        })
        .collect()
}
