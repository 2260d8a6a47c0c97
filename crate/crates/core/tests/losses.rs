use objdisc::losses::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mask = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
    let w = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
    (mask, w)
}

#[test]
fn bce_matches_hand_evaluation() {
    let v: f64 = weighted_bce(&[1.0, 0.0], &[0.8, 0.2], 0.5).unwrap();
    assert!((v - 0.278_929_439_142_762_1).abs() < 1e-12, "{v}");
}

#[test]
fn bce_is_monotone_in_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (mask, w) = random_case(&mut rng, 32);
        let s = rng.gen_range(0.0..1.0);
        let base = weighted_bce(&mask, &w, s).unwrap();
        let i = rng.gen_range(0..32);
        let mut up = w.clone();
        up[i] += 0.005;
        let moved = weighted_bce(&mask, &up, s).unwrap();
        if mask[i] == 1.0 {
            assert!(moved < base);
        } else {
            assert!(moved > base);
        }
    }
}

#[test]
fn bce_grows_with_confidence_when_a_pixel_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (mut mask, w) = random_case(&mut rng, 16);
        mask[0] = 1.0;
        assert!(weighted_bce_grad_confidence(&mask, &w) >= 0.0);
        let a = weighted_bce(&mask, &w, 0.2).unwrap();
        let b = weighted_bce(&mask, &w, 0.7).unwrap();
        assert!(b >= a);
    }
}

#[test]
fn background_term_is_bce_on_the_complement() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (covered, w_bg) = random_case(&mut rng, 40);
        let complement: Vec<f64> = covered.iter().map(|c| 1.0 - c).collect();
        let a = background_nll(&w_bg, &covered).unwrap();
        let b = weighted_bce(&complement, &w_bg, 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
    let v = background_nll(&[0.5; 6], &[1.0; 6]).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn completion_ignores_fill_pixels_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.gen_range(4..64);
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        valid[0] = true;
        let pred: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..4 * n).map(|i| if valid[i / 4] { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect();
        let base = completion_mse(&pred, &target, &valid, 4).unwrap();
        let (mut p2, mut t2) = (pred.clone(), target.clone());
        for i in 0..4 * n {
            if !valid[i / 4] {
                p2[i] = rng.gen_range(-100.0..100.0);
                t2[i] = rng.gen_range(-100.0..100.0);
            }
        }
        assert_eq!(completion_mse(&p2, &t2, &valid, 4).unwrap().to_bits(), base.to_bits());
    }
}

#[test]
fn completion_examples() {
    let v = completion_mse(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], &[true], 4).unwrap();
    assert_eq!(v, 0.25);
    assert!(completion_mse(&[0.0; 4], &[0.0; 4], &[false], 4).is_err());
}

#[test]
fn total_loss_examples() {
    let parts = [(LossTerm::Motion, 1.0), (LossTerm::Completion, 2.0), (LossTerm::Background, 0.5)];
    let w = LossWeights::default();
    assert_eq!(total_loss(Modality::Lidar, Phase::BurnIn, &parts, &w).unwrap(), 3.5);
    let zero = LossWeights(parts.iter().map(|p| (p.0, 0.0)).collect());
    assert_eq!(total_loss(Modality::Lidar, Phase::BurnIn, &parts, &zero).unwrap(), 0.0);
    let intra = LossTerm::Distill {
        from: Modality::Lidar,
        to: Modality::Lidar,
    };
    assert!(total_loss(Modality::Lidar, Phase::Distill, &[(intra, 1.0)], &w).is_err());
    let cross = term_for_source(Modality::Lidar, TargetSource::Teacher2D);
    assert!(total_loss(Modality::Lidar, Phase::Distill, &[(cross, 1.0)], &w).is_ok());
    assert!(total_loss(Modality::Lidar, Phase::BurnIn, &[(cross, 1.0)], &w).is_err());
}
