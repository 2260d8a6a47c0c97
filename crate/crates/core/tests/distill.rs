use objdisc::dataset::{Sequence, Split};
use objdisc::distill::*;
use objdisc::losses::{LossTerm, LossWeights, Modality, Phase, TargetSource};
use objdisc::pseudolabel::{Candidate, Mask, MaskSet};
use objdisc::slotcore::{check_gradients, Graph, ModelConfig, ModelParams};
use objdisc::synthgen::{degrade, generate, DegradeMode, SceneSpec};
use objdisc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(in_channels: usize) -> ModelConfig {
    ModelConfig {
        width: 8,
        stem_width: 4,
        decoder_width: 4,
        mlp_hidden: 8,
        num_slots: 3,
        downsample: 2,
        first_frame_iters: 1,
        ..ModelConfig::new(in_channels)
    }
}

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 64,
        focal: 45.0,
        horizon_row: 12.0,
        lidar_row_step: 1,
        ..SceneSpec::toy(seed, 2, 1)
    }
}

fn small_sequence(seed: u64) -> Sequence {
    Sequence::from_bundle("s", Split::Train, &generate(&small_spec(seed)).unwrap()).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        model_2d: micro(3),
        model_3d: micro(4),
        burn_in_steps: 4,
        distill_steps: 4,
        warmup_steps: 2,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: TrainConfig, seqs: &[Sequence]) -> Trainer<f32> {
    Trainer::new(cfg, seqs).unwrap()
}

fn l2_distance(a: &ModelParams<f64>, b: &ModelParams<f64>) -> f64 {
    a.flat().iter().zip(b.flat().iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn zero_learning_rate_leaves_models_unchanged() {
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_config(1)
    };
    let mut tr = trainer(cfg, &[small_sequence(1)]);
    let before = tr.state.clone();
    let r = tr.step().unwrap();
    assert!(r.rgb.total.is_finite() && r.lidar.total.is_finite());
    assert!(r.rgb.value(LossTerm::Motion).is_some());
    assert_eq!(tr.state.pair2d.student.params, before.pair2d.student.params);
    assert_eq!(tr.state.pair3d.student.params, before.pair3d.student.params);
    // Teacher and student start equal; the EMA keeps them equal up to rounding.
    let expected = ema_update(&before.pair2d.teacher.params, &before.pair2d.student.params, 0.996).unwrap();
    assert_eq!(tr.state.pair2d.teacher.params, expected);
    let drift = tr.state.pair2d.teacher.params.flat().iter().zip(before.pair2d.teacher.params.flat().iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(drift < 1e-6);
}

#[test]
fn motion_loss_decreases_on_a_fixed_batch() {
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup_steps: 0,
        burn_in_steps: 50,
        distill_steps: 0,
        lr_floor: 1.0,
        aug_2d: AugmentConfig::none(),
        aug_3d: AugmentConfig::none(),
        ..small_config(2)
    };
    let tr = trainer(cfg.clone(), &[small_sequence(2)]);
    let batch = tr.sample_batch(0);
    let mut state = tr.state.clone();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let r = burn_in_step(&mut state, &batch, &cfg).unwrap();
        losses.push(r.rgb.value(LossTerm::Motion).unwrap());
    }
    let avg: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "moving averages {avg:?}");
    }
}

#[test]
fn teachers_move_only_by_ema() {
    let mut tr = trainer(small_config(3), &[small_sequence(3)]);
    for _ in 0..6 {
        let before = tr.state.clone();
        tr.step().unwrap();
        for m in [Modality::Rgb, Modality::Lidar] {
            let (old, new) = (before.pair(m), tr.state.pair(m));
            let expected = ema_update(&old.teacher.params, &new.student.params, 0.996).unwrap();
            assert_eq!(new.teacher.params, expected);
            assert_eq!(params_checksum(&new.teacher.params), params_checksum(&expected));
            assert_ne!(params_checksum(&new.student.params), params_checksum(&old.student.params));
        }
    }
}

#[test]
fn ema_contracts_geometrically() {
    let cfg = small_config(4);
    let state = TrainState::<f64>::init(&cfg).unwrap();
    let student = state.pair2d.student.params.clone();
    let mut teacher = state.pair2d.teacher.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in teacher.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
    }
    let d0 = l2_distance(&teacher, &student);
    for _ in 0..10 {
        teacher = ema_update(&teacher, &student, 0.996).unwrap();
    }
    let ratio = l2_distance(&teacher, &student) / d0;
    let expected = 0.996f64.powi(10);
    assert!(((ratio - expected) / expected).abs() < 1e-9, "{ratio} vs {expected}");
}

#[test]
fn silent_teachers_reduce_distillation_to_burn_in_terms() {
    let cfg = TrainConfig {
        burn_in_steps: 0,
        conf_threshold: 1.5,
        ..small_config(5)
    };
    let mut tr = trainer(cfg, &[small_sequence(5)]);
    let r = tr.step().unwrap();
    assert_eq!(r.phase, Phase::Distill);
    assert_eq!(r.candidates, (0, 0));
    for b in [&r.rgb, &r.lidar] {
        assert!(b.terms.iter().all(|t| !matches!(t.0, LossTerm::Distill { .. })));
        assert!(b.value(LossTerm::Motion).is_some());
    }
}

#[test]
fn one_aligned_candidate_gives_one_distillation_term() {
    let cfg = small_config(6);
    let state = TrainState::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (16, 16);
    let frames = Tensor::from_fn(&[2, h, w, 4], |_| rng.gen_range(-1.0..1.0));
    let cand = Candidate {
        mask: Mask::from_fn(h, w, |r, c| (2..7).contains(&r) && (3..9).contains(&c)),
        confidence: 0.8,
        source_slot: 1,
    };
    let rec = AugmentRecord {
        flip: true,
        ..AugmentRecord::identity(h, w)
    };
    let aligned = align_candidates(&[cand.clone()], &rec).unwrap();
    assert_eq!(aligned[0].mask, cand.mask.flip_horizontal());
    let input = BranchInput {
        modality: Modality::Lidar,
        frames,
        batch: 1,
        steps: 2,
        reconstruction: None,
        targets: vec![
            vec![Target {
                mask: aligned[0].mask.clone(),
                confidence: Some(aligned[0].confidence),
                source: TargetSource::Teacher2D,
            }],
            vec![],
        ],
    };
    let model = &state.pair3d.student;
    let mut g = Graph::new(&model.params);
    let (loss, plan) = branch_loss(model, &mut g, &input, Phase::Distill, &LossWeights::default()).unwrap();
    let d = LossTerm::Distill {
        from: Modality::Rgb,
        to: Modality::Lidar,
    };
    assert_eq!(plan.count(d), 1);
    assert_eq!(plan.assignments[0].confidence, 0.8);
    let terms: Vec<_> = loss.terms.iter().filter(|t| t.0 == d).collect();
    assert_eq!(terms.len(), 1);
    assert_eq!(terms[0].2, 1);
}

#[test]
fn intra_modal_targets_are_rejected() {
    let cfg = small_config(7);
    let state = TrainState::<f64>::init(&cfg).unwrap();
    let (h, w) = (8, 8);
    for (m, model, source) in [
        (Modality::Rgb, &state.pair2d.student, TargetSource::Teacher2D),
        (Modality::Lidar, &state.pair3d.student, TargetSource::Teacher3D),
    ] {
        let c = model.config.in_channels;
        let input = BranchInput {
            modality: m,
            frames: Tensor::zeros(&[1, h, w, c]),
            batch: 1,
            steps: 1,
            reconstruction: None,
            targets: vec![vec![Target {
                mask: Mask::from_fn(h, w, |r, _| r < 3),
                confidence: Some(0.9),
                source,
            }]],
        };
        let mut g = Graph::new(&model.params);
        assert!(branch_loss(model, &mut g, &input, Phase::Distill, &LossWeights::default()).is_err());
    }
}

#[test]
fn night_frames_still_receive_lidar_supervision() {
    let bundle = degrade(&generate(&small_spec(8)).unwrap(), DegradeMode::Night, 0.9).unwrap();
    let mut seq = Sequence::from_bundle("n", Split::Train, &bundle).unwrap();
    for m in &mut seq.motion {
        m.masks.clear();
    }
    let cfg = TrainConfig {
        burn_in_steps: 0,
        conf_threshold: 0.0,
        min_area: 4,
        ..small_config(8)
    };
    let mut tr = trainer(cfg, &[seq]);
    let r = tr.step().unwrap();
    assert!(r.candidates.1 > 0);
    let d = LossTerm::Distill {
        from: Modality::Lidar,
        to: Modality::Rgb,
    };
    assert!(r.rgb.count(d) > 0);
    assert!(r.rgb.value(d).unwrap() > 0.0);
    assert!(r.rgb.value(LossTerm::Motion).is_none());
}

#[test]
fn identity_augmentation_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frame = Tensor::<f32>::from_fn(&[12, 20, 3], |_| rng.gen_range(0.0..1.0));
    for seed in 0..5 {
        let (out, rec) = augment(&AugmentInput::Frame(frame.clone()), &AugmentConfig::none(), seed).unwrap();
        assert!(rec.is_identity());
        match out {
            AugmentInput::Frame(f) => assert_eq!(f, frame),
            _ => unreachable!(),
        }
    }
}

#[test]
fn flip_alignment_is_an_involution() {
    let mask = Mask::from_fn(10, 14, |r, c| r * 3 + c < 11);
    let set = MaskSet::new(10, 14, 0, vec![mask.clone(), Mask::new(10, 14)]);
    let rec = AugmentRecord {
        flip: true,
        ..AugmentRecord::identity(10, 14)
    };
    let once = align_targets(&set, &rec).unwrap();
    assert_eq!(once.masks[0], mask.flip_horizontal());
    assert_eq!(once.masks.len(), 2);
    assert_eq!(align_targets(&once, &rec).unwrap(), set);
}

#[test]
fn photometric_records_do_not_move_masks() {
    let cfg = AugmentConfig {
        jitter: 1.0,
        jitter_strength: 0.25,
        ..AugmentConfig::none()
    };
    let mask = Mask::from_fn(16, 24, |r, c| (r + c) % 5 == 0);
    for seed in 0..10 {
        let rec = AugmentRecord::sample(&cfg, Modality::Rgb, 16, 24, seed);
        assert!(rec.is_geometric_identity());
        assert!(!rec.photometric.is_empty());
        assert_eq!(align_mask(&mask, &rec).unwrap(), mask);
    }
}

#[test]
fn crop_alignment_matches_the_transformed_input() {
    let cfg = AugmentConfig {
        flip: 0.5,
        crop: 1.0,
        ..AugmentConfig::none()
    };
    let (h, w) = (24, 40);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.3));
        let other = Mask::from_fn(h, w, |r, c| r < 12 && c > 10);
        let img = Tensor::<f32>::from_fn(&[h, w, 3], |i| if mask.data()[i / 3] { 1.0 } else { 0.0 });
        let rec = AugmentRecord::sample(&cfg, Modality::Rgb, h, w, seed);
        assert!(rec.crop.is_some() || rec.is_geometric_identity());
        let out = apply_rgb(&img, &rec).unwrap();
        let from_image = Mask::from_vec(h, w, out.data().chunks(3).map(|p| p[0] > 0.5).collect());
        let aligned = align_mask(&mask, &rec).unwrap();
        assert_eq!(aligned, from_image);
        let other_aligned = align_mask(&other, &rec).unwrap();
        let overlap_img = from_image.intersection(&other_aligned);
        assert_eq!(aligned.intersection(&other_aligned), overlap_img);
    }
}

/// Frozen-plan composite loss on a micro model against central differences.
#[test]
fn composite_loss_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let cfg = TrainConfig {
            model_3d: ModelConfig {
                downsample: 1,
                ..micro(4)
            },
            ..small_config(seed)
        };
        let state = TrainState::<f64>::init(&cfg).unwrap();
        let model = &state.pair3d.student;
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let (h, w) = (8, 8);
        let frames = Tensor::from_fn(&[2, h, w, 4], |_| rng.gen_range(-1.0..1.0));
        let target = Tensor::from_fn(&[2, h, w, 4], |_| rng.gen_range(-1.0..1.0));
        let valid = (0..2 * h * w).map(|_| rng.gen_bool(0.7)).collect();
        let rect = |r0: usize, c0: usize| Mask::from_fn(h, w, move |r, c| (r0..r0 + 3).contains(&r) && (c0..c0 + 4).contains(&c));
        let input = BranchInput {
            modality: Modality::Lidar,
            frames,
            batch: 1,
            steps: 2,
            reconstruction: Some(ReconTarget { target, valid }),
            targets: vec![
                vec![
                    Target {
                        mask: rect(0, 0),
                        confidence: None,
                        source: TargetSource::Motion3D,
                    },
                    Target {
                        mask: rect(4, 3),
                        confidence: Some(0.85),
                        source: TargetSource::Teacher2D,
                    },
                ],
                vec![Target {
                    mask: rect(2, 4),
                    confidence: Some(0.75),
                    source: TargetSource::Teacher2D,
                }],
            ],
        };
        let plan = {
            let mut g = Graph::new(&model.params);
            let fwd = forward_branch(model, &mut g, &input).unwrap();
            plan_targets(model, &g, &fwd, &input, Phase::Distill).unwrap()
        };
        assert_eq!(plan.assignments.len(), 3);
        let weights = LossWeights::default();
        let report = check_gradients(&model.params, 1e-4, 1e-6, |g| {
            let fwd = forward_branch(model, g, &input).unwrap();
            assemble_loss(model, g, &fwd, &input, &plan, Phase::Distill, &weights).unwrap().total
        })
        .unwrap();
        assert!(report.analytic_norm > 0.0);
        assert!(report.max_relative_error() < 1e-4, "seed {seed}: {:?}", report.per_tensor);
    }
}

fn run_log(tr: &mut Trainer<f32>, until: u64) -> String {
    let mut buf = Vec::new();
    tr.run_until(until, Some(&mut buf)).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn training_is_reproducible() {
    let seqs = [small_sequence(10), small_sequence(11)];
    let mut a = trainer(small_config(10), &seqs);
    let mut b = trainer(small_config(10), &seqs);
    assert_eq!(run_log(&mut a, 8), run_log(&mut b, 8));
    assert_eq!(a.state, b.state);
    let mut c = trainer(small_config(11), &seqs);
    assert_ne!(run_log(&mut c, 8), run_log(&mut trainer(small_config(10), &seqs), 8));
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_run() {
    let seqs = [small_sequence(12)];
    let cfg = small_config(12);
    let mut full = trainer(cfg.clone(), &seqs);
    let full_log = run_log(&mut full, 8);

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(cfg.clone(), &seqs);
    let mut log = run_log(&mut first, 5);
    save_state(dir.path(), &first.state, &first.stats).unwrap();
    let (state, stats) = load_state::<f32>(dir.path()).unwrap();
    assert_eq!(state, first.state);
    let mut resumed = Trainer::with_state(cfg, state, stats, &seqs).unwrap();
    log.push_str(&run_log(&mut resumed, 8));
    assert_eq!(log, full_log);
    assert_eq!(resumed.state, full.state);
}

#[test]
fn step_phase_is_checked() {
    let cfg = small_config(13);
    let tr = trainer(cfg.clone(), &[small_sequence(13)]);
    let mut state = tr.state.clone();
    let batch = tr.sample_batch(0);
    assert!(matches!(distill_step(&mut state, &batch, &cfg), Err(DistillError::Phase { .. })));
    assert_eq!(state.step, 0);
}
