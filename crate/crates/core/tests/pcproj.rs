use objdisc::pcproj::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kitti_like() -> Calibration<f64> {
    let mut c = Calibration::pinhole(60.0, 32.0, 12.0);
    c.lidar_to_camera = [[0.0, -1.0, 0.0, 0.05], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]];
    c
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
    let points = (0..n)
        .map(|_| Point {
            x: rng.gen_range(-2.0..30.0),
            y: rng.gen_range(-15.0..15.0),
            z: rng.gen_range(-2.0..3.0),
            reflectance: rng.gen_range(0.0..1.0),
        })
        .collect();
    PointCloud::new(points, 0)
}

#[test]
fn projection_ignores_point_order() {
    let calib = kitti_like();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pc = random_cloud(&mut rng, 400);
        // Force collisions on a few pixels.
        let dup: Vec<Point<f64>> = pc.points[..50].iter().map(|p| Point { x: p.x * 1.5, y: p.y * 1.5, z: p.z * 1.5, ..*p }).collect();
        pc.points.extend(dup);
        let a = project_front_view(&pc, &calib, 24, 64, 0.0).unwrap();
        pc.points.shuffle(&mut rng);
        let b = project_front_view(&pc, &calib, 24, 64, 0.0).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn valid_pixels_reproject_onto_themselves() {
    let calib = kitti_like();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let fv = project_front_view(&random_cloud(&mut rng, 500), &calib, 24, 64, 0.0).unwrap();
        assert!(fv.num_valid() > 20);
        let points = fv
            .points()
            .into_iter()
            .map(|(_, r)| {
                let l = calib.rect_to_lidar(r).unwrap();
                Point {
                    x: l[0],
                    y: l[1],
                    z: l[2],
                    reflectance: 0.0,
                }
            })
            .collect();
        let again = project_front_view(&PointCloud::new(points, 0), &calib, 24, 64, 0.0).unwrap();
        assert_eq!(again.valid_set(), fv.valid_set());
        for (r, c) in fv.valid_set() {
            let (p, q) = (fv.pixel(r, c), again.pixel(r, c));
            assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-9));
            assert!(p[3] >= 0.0);
        }
    }
}

#[test]
fn fill_pixels_carry_the_fill_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fv = project_front_view(&random_cloud(&mut rng, 300), &kitti_like(), 24, 64, -1.0).unwrap();
    for r in 0..24 {
        for c in 0..64 {
            assert_eq!(fv.is_valid(r, c), fv.pixel(r, c) != [-1.0; 4]);
        }
    }
}

#[test]
fn dropping_touches_only_the_dropped_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fv = project_front_view(&random_cloud(&mut rng, 600), &kitti_like(), 24, 64, 0.0).unwrap();
    let n = fv.num_valid();
    for (ratio, seed) in [(0.2, 1), (0.5, 2), (0.05, 3)] {
        let (out, rec) = drop_points(&fv, ratio, seed).unwrap();
        assert_eq!(rec.dropped.len(), (ratio * n as f64).round() as usize);
        assert_eq!(out.num_valid(), n - rec.dropped.len());
        for r in 0..24 {
            for c in 0..64 {
                if rec.dropped.contains(&(r, c)) {
                    assert!(fv.is_valid(r, c) && !out.is_valid(r, c));
                    assert_eq!(out.pixel(r, c), [0.0; 4]);
                } else {
                    assert_eq!(out.pixel(r, c).map(f64::to_bits), fv.pixel(r, c).map(f64::to_bits));
                    assert_eq!(out.is_valid(r, c), fv.is_valid(r, c));
                }
            }
        }
        assert_eq!(drop_points(&fv, ratio, seed).unwrap().1, rec);
    }
    assert!(drop_points(&fv, 1.5, 0).is_err());
}

#[test]
fn normalization_rejects_degenerate_statistics() {
    let mut fv = FrontViewImage::empty(2, 2, 0.0);
    fv.set_pixel(0, 0, [1.0, 2.0, 3.0, 4.0]);
    let stats = ChannelStats::from_images([&fv]).unwrap();
    assert!(normalize_front_view(&fv, &stats).is_err());
    let stats = ChannelStats {
        min: [-5.0; 4],
        max: [5.0; 4],
    };
    let n = normalize_front_view(&fv, &stats).unwrap();
    assert_eq!(n.pixel(0, 0), [0.6, 0.7, 0.8, 0.9]);
    assert_eq!(n.pixel(1, 1), [0.0; 4]);
    assert!(!n.is_valid(1, 1));
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_cloud(&mut rng, 50).cast::<f32>();
    let p = dir.path().join("c.bin");
    write_velodyne(&p, &cloud).unwrap();
    assert_eq!(read_velodyne(&p, 0).unwrap(), cloud);

    let calib = kitti_like();
    let p = dir.path().join("calib.txt");
    write_calibration(&p, &calib).unwrap();
    let back = read_calibration(&p).unwrap();
    let fa = project_front_view(&cloud.cast::<f64>(), &calib, 24, 64, 0.0).unwrap();
    let fb = project_front_view(&cloud.cast::<f64>(), &back, 24, 64, 0.0).unwrap();
    assert_eq!(fa.valid_set(), fb.valid_set());

    let fv = fa.cast::<f32>();
    let p = dir.path().join("fv.bin");
    write_front_view(&p, &fv).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"FVIM");
    assert_eq!(bytes.len(), 16 + 24 * 64 * 16);
    assert_eq!(read_front_view(&p).unwrap(), fv);
}
