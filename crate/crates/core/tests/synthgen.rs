use objdisc::synthgen::*;

fn near(labels: &[u16], w: usize, h: usize, r: usize, c: usize, k: u16) -> bool {
    let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
    let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
    (r0..=r1).any(|y| (c0..=c1).any(|x| labels[y * w + x] == k))
}

#[test]
fn same_seed_gives_identical_bundles() {
    for seed in 0..5 {
        let spec = SceneSpec::sample_toy(seed);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }
    assert_ne!(generate(&SceneSpec::sample_toy(1)).unwrap(), generate(&SceneSpec::sample_toy(2)).unwrap());
}

#[test]
fn motion_masks_are_inside_gt_and_objects_move_linearly() {
    for seed in 0..10 {
        let spec = SceneSpec::sample_toy(seed);
        let b = generate(&spec).unwrap();
        assert!((2..=4).contains(&spec.n_objects()) && spec.n_static <= 1 && spec.n_moving >= 1);
        for f in &b.frames {
            assert_eq!(f.gt_masks().len(), spec.n_objects());
            assert_eq!(f.motion_masks().len(), spec.n_moving);
            for (m, g) in f.motion.labels.iter().zip(&f.gt.labels) {
                assert!(*m == 0 || m == g);
            }
        }
        for o in &b.objects {
            assert!((1.0..=70.0).contains(&o.depth));
        }
    }
}

#[test]
fn point_cloud_reproduces_silhouettes() {
    for seed in 0..5 {
        let spec = SceneSpec {
            lidar_row_step: 1,
            lidar_dropout: 0.0,
            lidar_top_fraction: 0.0,
            ..SceneSpec::toy(seed, 2, 1)
        };
        let b = generate(&spec).unwrap();
        let (h, w) = (spec.height, spec.width);
        for f in &b.frames {
            let mut hit = vec![0u16; h * w];
            for (p, &k) in f.cloud.points.iter().zip(&f.point_objects) {
                let rect = b.calibration.lidar_to_rect([p.x, p.y, p.z].map(f64::from));
                if let Some((r, c)) = b.calibration.pixel_of_rect(rect) {
                    if k > 0 && (0..h as i64).contains(&r) && (0..w as i64).contains(&c) {
                        let (r, c) = (r as usize, c as usize);
                        assert!(near(&f.gt.labels, w, h, r, c, k), "seed {seed}: point of object {k} at ({r}, {c})");
                        hit[r * w + c] = k;
                    }
                }
            }
            for r in 0..h {
                for c in 0..w {
                    let k = f.gt.labels[r * w + c];
                    if k > 0 {
                        assert!(near(&hit, w, h, r, c, k), "seed {seed}: pixel ({r}, {c}) of object {k} has no point");
                    }
                }
            }
        }
    }
}

#[test]
fn every_object_has_lidar_returns() {
    for seed in 0..10 {
        let b = generate(&SceneSpec::sample_toy(seed)).unwrap();
        for f in &b.frames {
            for k in 1..=b.objects.len() as u16 {
                assert!(f.point_objects.contains(&k), "seed {seed}: object {k} has no points");
            }
        }
    }
}

#[test]
fn low_reflectivity_removes_points_of_flagged_objects_only() {
    let spec = SceneSpec {
        low_reflectivity: vec![1],
        ..SceneSpec::toy(11, 2, 1)
    };
    let b = generate(&spec).unwrap();
    assert!(b.objects[1].low_reflectivity && !b.objects[0].low_reflectivity);
    let d = degrade(&b, DegradeMode::LowReflectivity, 0.9).unwrap();
    let count = |f: &FrameData, k: u16| f.point_objects.iter().filter(|&&x| x == k).count();
    for (x, y) in d.frames.iter().zip(&b.frames) {
        assert_eq!(x.rgb, y.rgb);
        let (before, after) = (count(y, 2), count(x, 2));
        assert!(before > 0);
        assert!(after as f64 <= 0.1 * before as f64, "{after} of {before} kept");
        for k in [0, 1, 3] {
            assert_eq!(count(x, k), count(y, k));
        }
    }
    let spec = SceneSpec {
        low_reflectivity: vec![5],
        ..SceneSpec::toy(11, 2, 1)
    };
    assert!(generate(&spec).is_err());
}

#[test]
fn night_scales_rgb_and_keeps_clouds() {
    let b = generate(&SceneSpec::toy(12, 1, 1)).unwrap();
    let d = degrade(&b, DegradeMode::Night, 0.9).unwrap();
    for (x, y) in d.frames.iter().zip(&b.frames) {
        assert_eq!(x.cloud, y.cloud);
        for (a, o) in x.rgb.data().iter().zip(y.rgb.data()) {
            assert!((a - 0.1 * o).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    assert!(degrade(&b, DegradeMode::Night, 1.5).is_err());
}
