use objdisc::evalfuse::{ari, banded_eval, f1_at_iou, late_fuse, match_counts, Counts, Evaluator, DEFAULT_BANDS};
use objdisc::pcproj::FrontViewImage;
use objdisc::pseudolabel::{LabelGrid, Mask, MaskSet};
use objdisc::reference::{ari_pairs, f1_exhaustive, late_fuse_outcomes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Disjoint instance masks from a random label grid with `k` labels.
fn random_instances(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u16) -> MaskSet {
    let labels = LabelGrid {
        height: h,
        width: w,
        labels: (0..h * w).map(|_| rng.gen_range(0..=k)).collect(),
    };
    labels.to_masks(0)
}

/// Blocky instances, so IoUs spread over the whole range.
fn blocky_instances(rng: &mut ChaCha8Rng, h: usize, w: usize, max: usize) -> MaskSet {
    let mut grid = LabelGrid::new(h, w);
    for id in 1..=rng.gen_range(0..=max) as u16 {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0..h) + 1, rng.gen_range(c0..w) + 1);
        for r in r0..r1 {
            for c in c0..c1 {
                grid.labels[r * w + c] = id;
            }
        }
    }
    grid.to_masks(0)
}

#[test]
fn ari_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = 64;
        let p: Vec<u16> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let t: Vec<u16> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        for fg in [false, true] {
            let a = ari(&p, &t, fg).unwrap();
            assert!((a - ari_pairs(&p, &t, fg)).abs() < 1e-12);
            assert!((a - ari(&t, &p, false).unwrap()).abs() < 1e-12 || fg);
        }
    }
}

#[test]
fn ari_is_label_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: Vec<u16> = (0..50).map(|_| rng.gen_range(0..4)).collect();
    let t: Vec<u16> = (0..50).map(|_| rng.gen_range(1..4)).collect();
    let relabel: Vec<u16> = p.iter().map(|&l| [7, 3, 9, 1][l as usize]).collect();
    assert!((ari(&p, &t, true).unwrap() - ari(&relabel, &t, true).unwrap()).abs() < 1e-15);
}

#[test]
fn f1_matches_exhaustive_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let pred = blocky_instances(&mut rng, 6, 8, 5);
        let gt = blocky_instances(&mut rng, 6, 8, 5);
        for thr in [0.5, 0.75] {
            let (f, p, r) = f1_at_iou(&pred, &gt, thr).unwrap();
            let (fo, po, ro) = f1_exhaustive(&pred, &gt, thr);
            assert!((f - fo).abs() < 1e-12 && (p - po).abs() < 1e-12 && (r - ro).abs() < 1e-12);
        }
    }
}

#[test]
fn f1_three_predictions_two_truths() {
    let row = |s: &str| Mask::from_vec(1, 8, s.chars().map(|c| c == '1').collect());
    let gt = MaskSet::new(1, 8, 0, vec![row("11110000"), row("00001111")]);
    let pred = MaskSet::new(1, 8, 0, vec![row("11100000"), row("00011000"), row("00000111")]);
    assert_eq!(f1_at_iou(&pred, &gt, 0.5).unwrap(), f1_exhaustive(&pred, &gt, 0.5));
    let c = match_counts(&pred, &gt, 0.5).unwrap();
    assert_eq!(c, Counts { tp: 2, fp: 1, fn_: 0 });
}

#[test]
fn precision_recall_non_increasing_in_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let pred = blocky_instances(&mut rng, 6, 8, 4);
        let gt = blocky_instances(&mut rng, 6, 8, 4);
        let mut last = (f64::INFINITY, f64::INFINITY);
        for thr in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let (_, p, r) = f1_at_iou(&pred, &gt, thr).unwrap();
            assert!(p <= last.0 && r <= last.1);
            last = (p, r);
        }
    }
}

#[test]
fn late_fuse_matches_brute_force_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let a = if case % 2 == 0 { blocky_instances(&mut rng, 6, 8, 4) } else { random_instances(&mut rng, 4, 4, 3) };
        let b = blocky_instances(&mut rng, if case % 2 == 0 { 6 } else { 4 }, if case % 2 == 0 { 8 } else { 4 }, 4);
        for tau in [0.1, 0.3, 0.7] {
            let fused = late_fuse(&a, &b, tau).unwrap();
            assert!(late_fuse_outcomes(&a, &b, tau).contains(&fused.masks));
            assert!(fused.len() <= a.len().min(b.len()));
            let mut x: Vec<_> = fused.masks.clone();
            let mut y: Vec<_> = late_fuse(&b, &a, tau).unwrap().masks;
            x.sort_by_key(|m| m.data().to_vec());
            y.sort_by_key(|m| m.data().to_vec());
            if late_fuse_outcomes(&a, &b, tau).len() == 1 {
                assert_eq!(x, y);
            }
        }
    }
}

#[test]
fn banded_report_is_concatenation_of_per_band_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (8, 12);
    let gt = blocky_instances(&mut rng, h, w, 4);
    let pred = blocky_instances(&mut rng, h, w, 4);
    let mut fv = FrontViewImage::<f32>::empty(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            if rng.gen_bool(0.7) {
                fv.set_pixel(r, c, [0.0, 0.0, 1.0, rng.gen_range(1.0..60.0)]);
            }
        }
    }
    let rows = banded_eval(&pred, &gt, &fv, &DEFAULT_BANDS).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.objects).sum::<usize>(), gt.len());
    for row in &rows {
        // Recompute the band independently: GT objects by median distance.
        let members: Vec<Mask> = gt
            .masks
            .iter()
            .filter(|g| {
                let mut d: Vec<f64> = g.pixels().filter(|&p| fv.valid_mask()[p]).map(|p| f64::from(fv.data()[p * 4 + 3])).collect();
                d.sort_by(f64::total_cmp);
                let m = if d.is_empty() {
                    f64::INFINITY
                } else if d.len() % 2 == 1 {
                    d[d.len() / 2]
                } else {
                    0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
                };
                (m >= row.lo && m < row.hi) || (row.hi == 70.0 && m >= 70.0)
            })
            .cloned()
            .collect();
        let preds: Vec<Mask> = pred.masks.iter().filter(|p| members.iter().any(|g| p.intersection(g) > 0)).cloned().collect();
        let expect = match_counts(&MaskSet::new(h, w, 0, preds), &MaskSet::new(h, w, 0, members), 0.5).unwrap();
        assert_eq!(row.counts, expect);
    }
    let mut e = Evaluator::new(&DEFAULT_BANDS, 0.5);
    e.add_frame(&pred, &gt, Some(&fv)).unwrap();
    let report = e.finish();
    assert_eq!(report.bands, rows);
}
