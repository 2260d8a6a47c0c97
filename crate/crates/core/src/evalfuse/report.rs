use std::fmt::Write as _;

use crate::pcproj::FrontViewImage;
use crate::pseudolabel::MaskSet;
use crate::scalar::Scalar;

use super::{ari, labels_of, match_counts, Counts, EvalError};

/// Metrics of one distance band.
#[derive(Clone, Debug, PartialEq)]
pub struct BandRow {
    pub lo: f64,
    pub hi: f64,
    pub objects: usize,
    /// Mean number of valid front-view pixels per GT object.
    pub avg_points: f64,
    pub counts: Counts,
}

/// Dataset-level metrics; detection counts are pooled over frames, ARIs are
/// per-frame means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub frames: usize,
    pub fg_ari: f64,
    pub all_ari: f64,
    pub counts: Counts,
    pub bands: Vec<BandRow>,
}

impl MetricsReport {
    pub fn f1_50(&self) -> f64 {
        self.counts.f1()
    }

    pub fn precision(&self) -> f64 {
        self.counts.precision()
    }

    pub fn recall(&self) -> f64 {
        self.counts.recall()
    }

    /// Header plus one overall row and one row per band.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,lo,hi,objects,avg_points,fg_ari,all_ari,f1_50,precision,recall\n");
        let _ = writeln!(
            s,
            "all,,,,,{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.fg_ari,
            self.all_ari,
            self.f1_50(),
            self.precision(),
            self.recall()
        );
        for b in &self.bands {
            let _ = writeln!(
                s,
                "band,{},{},{},{:.3},,,{:.6},{:.6},{:.6}",
                b.lo,
                b.hi,
                b.objects,
                b.avg_points,
                b.counts.f1(),
                b.counts.precision(),
                b.counts.recall()
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "frames {}  fg-ARI {:.4}  all-ARI {:.4}  F1@50 {:.4}  P {:.4}  R {:.4}\n",
            self.frames,
            self.fg_ari,
            self.all_ari,
            self.f1_50(),
            self.precision(),
            self.recall()
        );
        for b in &self.bands {
            let _ = writeln!(
                s,
                "  {:>5.1}-{:<5.1} m  objects {:>4}  pts/obj {:>8.1}  F1@50 {:.4}  P {:.4}  R {:.4}",
                b.lo,
                b.hi,
                b.objects,
                b.avg_points,
                b.counts.f1(),
                b.counts.precision(),
                b.counts.recall()
            );
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Band index of a distance: `[lo, hi)` intervals; beyond the last band,
/// or without a distance, the farthest band.
pub fn band_index(distance: Option<f64>, bands: &[(f64, f64)]) -> usize {
    let last = bands.len() - 1;
    match distance {
        Some(d) => bands.iter().position(|&(lo, hi)| d >= lo && d < hi).unwrap_or(if d < bands[0].0 { 0 } else { last }),
        None => last,
    }
}

/// Per-band `(counts, objects, valid points)` for one frame. Each GT object
/// is banded by the median distance of its valid pixels; a band is scored
/// on its GT objects against the predictions overlapping them.
pub fn banded_counts<T: Scalar>(
    pred: &MaskSet,
    gt: &MaskSet,
    fv: &FrontViewImage<T>,
    bands: &[(f64, f64)],
    threshold: f64,
) -> Result<Vec<(Counts, usize, usize)>, EvalError> {
    if bands.is_empty() {
        return Ok(Vec::new());
    }
    if (gt.height, gt.width) != (fv.height(), fv.width()) {
        return Err(EvalError::Shape("ground truth and front view grids differ".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bands.len()];
    let mut points = vec![0usize; bands.len()];
    for (j, g) in gt.masks.iter().enumerate() {
        let d: Vec<f64> = g
            .pixels()
            .filter(|&p| fv.is_valid(p / fv.width(), p % fv.width()))
            .map(|p| fv.pixel(p / fv.width(), p % fv.width())[3].as_f64())
            .collect();
        if d.is_empty() {
            log::warn!("object {j} of frame {} has no valid points; using farthest band", gt.frame_id);
        }
        let b = band_index(median(d.clone()), bands);
        members[b].push(j);
        points[b] += d.len();
    }
    let mut out = Vec::with_capacity(bands.len());
    for (b, idx) in members.iter().enumerate() {
        let gt_b = MaskSet::new(gt.height, gt.width, gt.frame_id, idx.iter().map(|&j| gt.masks[j].clone()).collect());
        let pred_b = MaskSet::new(
            pred.height,
            pred.width,
            pred.frame_id,
            pred.masks
                .iter()
                .filter(|p| gt_b.masks.iter().any(|g| p.intersection(g) > 0))
                .cloned()
                .collect(),
        );
        out.push((match_counts(&pred_b, &gt_b, threshold)?, idx.len(), points[b]));
    }
    Ok(out)
}

/// Banded metrics of a single frame.
pub fn banded_eval<T: Scalar>(pred: &MaskSet, gt: &MaskSet, fv: &FrontViewImage<T>, bands: &[(f64, f64)]) -> Result<Vec<BandRow>, EvalError> {
    Ok(banded_counts(pred, gt, fv, bands, 0.5)?
        .into_iter()
        .zip(bands)
        .map(|((counts, objects, pts), &(lo, hi))| BandRow {
            lo,
            hi,
            objects,
            avg_points: if objects > 0 { pts as f64 / objects as f64 } else { 0.0 },
            counts,
        })
        .collect())
}

/// Accumulates frames into a [`MetricsReport`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    bands: Vec<(f64, f64)>,
    threshold: f64,
    frames: usize,
    fg: (f64, usize),
    all: (f64, usize),
    counts: Counts,
    band_acc: Vec<(Counts, usize, usize)>,
}

impl Evaluator {
    /// `bands` may be empty for an unbanded report.
    pub fn new(bands: &[(f64, f64)], threshold: f64) -> Self {
        Self {
            bands: bands.to_vec(),
            threshold,
            frames: 0,
            fg: (0.0, 0),
            all: (0.0, 0),
            counts: Counts::default(),
            band_acc: vec![(Counts::default(), 0, 0); bands.len()],
        }
    }

    pub fn add_frame<T: Scalar>(&mut self, pred: &MaskSet, gt: &MaskSet, fv: Option<&FrontViewImage<T>>) -> Result<(), EvalError> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(EvalError::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let (p, t) = (labels_of(pred), labels_of(gt));
        if let Ok(v) = ari(&p.labels, &t.labels, true) {
            self.fg.0 += v;
            self.fg.1 += 1;
        }
        if let Ok(v) = ari(&p.labels, &t.labels, false) {
            self.all.0 += v;
            self.all.1 += 1;
        }
        self.counts.add(match_counts(pred, gt, self.threshold)?);
        if let Some(fv) = fv {
            for (acc, row) in self.band_acc.iter_mut().zip(banded_counts(pred, gt, fv, &self.bands, self.threshold)?) {
                acc.0.add(row.0);
                acc.1 += row.1;
                acc.2 += row.2;
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn finish(&self) -> MetricsReport {
        let mean = |(s, n): (f64, usize)| if n > 0 { s / n as f64 } else { 0.0 };
        MetricsReport {
            frames: self.frames,
            fg_ari: mean(self.fg),
            all_ari: mean(self.all),
            counts: self.counts,
            bands: self
                .band_acc
                .iter()
                .zip(&self.bands)
                .map(|(&(counts, objects, pts), &(lo, hi))| BandRow {
                    lo,
                    hi,
                    objects,
                    avg_points: if objects > 0 { pts as f64 / objects as f64 } else { 0.0 },
                    counts,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::Mask;

    #[test]
    fn median_rule_and_bands() {
        assert_eq!(median(vec![12.0, 9.0, 11.0]), Some(11.0));
        let bands = super::super::DEFAULT_BANDS;
        assert_eq!(band_index(Some(11.0), &bands), 1);
        assert_eq!(band_index(Some(5.0), &bands), 0);
        assert_eq!(band_index(Some(90.0), &bands), 2);
        assert_eq!(band_index(None, &bands), 2);
    }

    #[test]
    fn objects_at_five_metres_fill_only_first_band() {
        let mut fv = FrontViewImage::<f32>::empty(2, 4, 0.0);
        for c in 0..4 {
            fv.set_pixel(0, c, [5.0, 0.0, 0.0, 5.0]);
        }
        let gt = MaskSet::new(2, 4, 0, vec![Mask::from_fn(2, 4, |_, c| c < 2), Mask::from_fn(2, 4, |_, c| c >= 2)]);
        let rows = banded_eval(&gt, &gt, &fv, &super::super::DEFAULT_BANDS).unwrap();
        assert_eq!(rows.iter().map(|r| r.objects).collect::<Vec<_>>(), vec![2, 0, 0]);
        assert_eq!(rows[0].avg_points, 2.0);
        assert_eq!(rows[0].counts.f1(), 1.0);
    }

    #[test]
    fn perfect_predictions_score_one_and_csv_has_band_rows() {
        let gt = MaskSet::new(2, 4, 0, vec![Mask::from_fn(2, 4, |_, c| c < 2), Mask::from_fn(2, 4, |r, c| r == 1 && c == 3)]);
        let fv = FrontViewImage::<f32>::empty(2, 4, 0.0);
        let mut e = Evaluator::new(&super::super::DEFAULT_BANDS, 0.5);
        e.add_frame(&gt, &gt, Some(&fv)).unwrap();
        let r = e.finish();
        assert_eq!((r.fg_ari, r.all_ari, r.f1_50()), (1.0, 1.0, 1.0));
        assert_eq!(r.to_csv().lines().count(), 1 + 1 + 3);
        let mut e = Evaluator::new(&[], 0.5);
        e.add_frame::<f32>(&MaskSet::empty(2, 4, 0), &gt, None).unwrap();
        assert_eq!(e.finish().recall(), 0.0);
    }
}
