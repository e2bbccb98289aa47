//! Loss-formula oracles: every loss term checked against independently
//! hand-coded arithmetic on random inputs, indicator gating checked for exact
//! zeros and zero gradients, and the stage-weighted total cross-checked
//! against its parts.

use mvhand_core::camera::{geodesic_distance, CameraEncoding};
use mvhand_core::data::synth::{sample_scene, GenConfig};
use mvhand_core::data::MultiViewSample;
use mvhand_core::hand::{
    build_toy_template, forward_joints, HandParams, HandParamsT, HandTemplate, TemplateConfig,
};
use mvhand_core::losses::{
    camera_loss, hand_loss, negative_depth_penalty, reprojection_loss, stage_weights, total_loss,
    LossConfig, SupervisionFlags,
};
use mvhand_core::network::{BlockPrediction, CameraPredT, ModelOutput};
use mvhand_core::rng::SeededRng;
use mvhand_core::tensor::{fd, Tensor};
use ndarray::{Array1, Array2, Array3};

fn template() -> HandTemplate {
    build_toy_template(&TemplateConfig::default()).unwrap()
}

fn random_hand(rng: &mut SeededRng) -> HandParams {
    HandParams {
        theta: (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        beta: (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        trans: [
            rng.uniform(-0.2, 0.2),
            rng.uniform(-0.2, 0.2),
            rng.uniform(0.3, 0.7),
        ],
    }
}

fn random_cam(rng: &mut SeededRng) -> CameraEncoding {
    CameraEncoding::new(
        [
            rng.uniform(-0.3, 0.3),
            rng.uniform(-0.3, 0.3),
            rng.uniform(0.3, 0.8),
        ],
        mvhand_core::camera::random_unit_quat(rng),
        [rng.uniform(0.7, 1.2), rng.uniform(0.7, 1.2)],
    )
    .unwrap()
}

fn random_cloud(rng: &mut SeededRng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 3), |_| rng.uniform(-0.15, 0.15))
}

// ---------------------------------------------------------------------------
// hand loss
// ---------------------------------------------------------------------------

#[test]
fn hand_loss_zero_at_coincidence_and_matches_oracle() {
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(100);
    let flags = SupervisionFlags::full(true);

    for trial in 0..20 {
        let gt = random_hand(&mut rng);
        let pred = if trial == 0 { gt.clone() } else { random_hand(&mut rng) };
        let gt_joints = random_cloud(&mut rng, 21);
        let pred_joints = if trial == 0 {
            gt_joints.clone()
        } else {
            random_cloud(&mut rng, 21)
        };
        let pred_t = HandParamsT::from_values(&pred);
        let joints_t = Tensor::constant(pred_joints.clone().into_dyn());
        let terms = hand_loss(&pred_t, &joints_t, &gt, &gt_joints, &flags, &cfg).unwrap();

        // Hand-coded oracle: plain means of squared differences; the 3D term
        // on root-relative coordinates.
        let mse = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let pose = mse(&pred.theta, &gt.theta);
        let shape = mse(&pred.beta, &gt.beta);
        let mut j3d = 0.0;
        for j in 0..21 {
            for a in 0..3 {
                let p = pred_joints[[j, a]] - pred_joints[[0, a]];
                let g = gt_joints[[j, a]] - gt_joints[[0, a]];
                j3d += (p - g) * (p - g);
            }
        }
        j3d /= 63.0;
        let oracle = 0.1 * pose + 0.05 * shape + 5.0 * j3d;

        assert!((terms.weighted.scalar() - oracle).abs() <= 1e-6);
        if trial == 0 {
            assert_eq!(terms.weighted.scalar(), 0.0);
        }
    }
}

#[test]
fn hand_loss_indicators_gate_terms_exactly() {
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(101);
    let gt = random_hand(&mut rng);
    let pred = random_hand(&mut rng);
    let gt_joints = random_cloud(&mut rng, 21);

    // All indicators off: exact zero for any prediction, and exactly zero
    // gradient (no graph edge reaches the inputs).
    let off = SupervisionFlags {
        has_mano: false,
        has_joints3d: false,
        has_joints2d: true,
        is_multiview: true,
    };
    let vars = HandParamsT::variables(&pred);
    let joints_leaf = Tensor::variable(random_cloud(&mut rng, 21).into_dyn());
    let terms = hand_loss(&vars, &joints_leaf, &gt, &gt_joints, &off, &cfg).unwrap();
    assert_eq!(terms.weighted.scalar(), 0.0);
    terms.weighted.backward();
    assert!(vars.theta.grad().is_none(), "gated theta must get no gradient");
    assert!(joints_leaf.grad().is_none(), "gated joints must get no gradient");

    // Toggling has_mano flips pose/shape between the oracle value and zero.
    let on = SupervisionFlags::full(true);
    let joints_const = Tensor::constant(gt_joints.clone().into_dyn());
    let with_mano = hand_loss(&vars, &joints_const, &gt, &gt_joints, &on, &cfg).unwrap();
    let without = hand_loss(
        &vars,
        &joints_const,
        &gt,
        &gt_joints,
        &SupervisionFlags {
            has_mano: false,
            ..on
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(without.parts.0, 0.0);
    assert_eq!(without.parts.1, 0.0);
    assert!(with_mano.parts.0 > 0.0);
    assert!(
        (with_mano.weighted.scalar()
            - without.weighted.scalar()
            - (0.1 * with_mano.parts.0 + 0.05 * with_mano.parts.1))
            .abs()
            <= 1e-12
    );
}

// ---------------------------------------------------------------------------
// camera loss
// ---------------------------------------------------------------------------

#[test]
fn camera_loss_zero_at_coincidence_and_single_view() {
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(102);
    let gt: Vec<CameraEncoding> = (0..3).map(|_| random_cam(&mut rng)).collect();
    let pred: Vec<CameraPredT> = gt.iter().map(CameraPredT::from_encoding).collect();
    let terms = camera_loss(&pred, &gt, &cfg).unwrap();
    assert!(terms.scaled.scalar().abs() < 1e-12);

    // Single view: exact zero by definition.
    let single = camera_loss(&pred[..1], &gt[..1], &cfg).unwrap();
    assert_eq!(single.scaled.scalar(), 0.0);
}

#[test]
fn camera_loss_translation_part_matches_mean_over_views() {
    // Two identical views except view 2's translation off by (1, 0, 0):
    // the translation part is (0 + 1) / 2 = 1/2.
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(103);
    let a = random_cam(&mut rng);
    let mut b_off = a.clone();
    b_off.t[0] += 1.0;
    let gt = vec![a.clone(), a.clone()];
    let pred = vec![
        CameraPredT::from_encoding(&a),
        CameraPredT::from_encoding(&b_off),
    ];
    let terms = camera_loss(&pred, &gt, &cfg).unwrap();
    assert!((terms.parts.0 - 0.5).abs() < 1e-12, "t part {}", terms.parts.0);
    assert!(terms.parts.1.abs() < 1e-9, "r part {}", terms.parts.1);
    assert!(terms.parts.2.abs() < 1e-12, "f part {}", terms.parts.2);
    // lambda_cam scales the sum of parts.
    assert!(
        (terms.scaled.scalar() - cfg.lambda_cam * (terms.parts.0 + terms.parts.1 + terms.parts.2))
            .abs()
            < 1e-12
    );
}

#[test]
fn camera_loss_rotation_part_ignores_quaternion_sign() {
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(104);
    let a = random_cam(&mut rng);
    let b = random_cam(&mut rng);
    let gt = vec![a.clone(), b.clone()];
    let negated = CameraPredT {
        t: Tensor::constant(Array1::from_vec(b.t.to_vec()).into_dyn()),
        q_raw: Tensor::constant(
            Array1::from_vec(b.q.iter().map(|v| -v).collect()).into_dyn(),
        ),
        fov: Tensor::constant(Array1::from_vec(b.fov.to_vec()).into_dyn()),
    };
    let pred = vec![CameraPredT::from_encoding(&a), negated];
    let terms = camera_loss(&pred, &gt, &cfg).unwrap();
    assert_eq!(terms.parts.1, 0.0, "negated quaternion is the same rotation");
}

#[test]
fn camera_loss_matches_hand_coded_oracle_on_random_inputs() {
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(105);
    for _ in 0..20 {
        let s = rng.uniform_usize(2, 5);
        let gt: Vec<CameraEncoding> = (0..s).map(|_| random_cam(&mut rng)).collect();
        let pr: Vec<CameraEncoding> = (0..s).map(|_| random_cam(&mut rng)).collect();
        let pred: Vec<CameraPredT> = pr.iter().map(CameraPredT::from_encoding).collect();
        let got = camera_loss(&pred, &gt, &cfg).unwrap();

        let mut oracle = 0.0;
        for (p, g) in pr.iter().zip(&gt) {
            let t2: f64 = p
                .t
                .iter()
                .zip(&g.t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let ang = geodesic_distance(&p.rotation().unwrap(), &g.rotation().unwrap()).unwrap();
            let f2: f64 = p
                .fov
                .iter()
                .zip(&g.fov)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            oracle += t2 + ang * ang + f2;
        }
        oracle *= cfg.lambda_cam / s as f64;
        assert!(
            (got.scaled.scalar() - oracle).abs() <= 1e-6,
            "camera loss {} vs oracle {oracle}",
            got.scaled.scalar()
        );
    }
}

// ---------------------------------------------------------------------------
// projection losses
// ---------------------------------------------------------------------------

fn consistent_sample(seed: u64, views: (usize, usize)) -> (MultiViewSample, HandTemplate) {
    let t = template();
    let cfg = GenConfig {
        views_min: views.0,
        views_max: views.1,
        ..Default::default()
    };
    (sample_scene(seed, &cfg, &t).unwrap(), t)
}

#[test]
fn reprojection_zero_on_generator_consistent_triples() {
    let (sample, _t) = consistent_sample(7, (2, 4));
    let cfg = LossConfig::default();
    let joints = Tensor::constant(sample.joints3d.clone().into_dyn());
    let cams: Vec<CameraPredT> = sample.cams.iter().map(CameraPredT::from_encoding).collect();
    let terms = reprojection_loss(
        &joints,
        &cams,
        &sample.joints2d,
        &sample.flags,
        &cfg,
        sample.image_size(),
    )
    .unwrap();
    assert!(terms.raw.abs() <= 1e-6, "reproj {}", terms.raw);
    // Depths of a visible hand are positive, so the penalty is zero.
    assert_eq!(negative_depth_penalty(&terms.depths).scalar(), 0.0);
}

#[test]
fn unit_pixel_shift_gives_unit_loss() {
    let (sample, _t) = consistent_sample(8, (2, 3));
    let cfg = LossConfig::default();
    let joints = Tensor::constant(sample.joints3d.clone().into_dyn());
    let cams: Vec<CameraPredT> = sample.cams.iter().map(CameraPredT::from_encoding).collect();
    let mut shifted = sample.joints2d.clone();
    for v in 0..sample.view_count() {
        for j in 0..21 {
            shifted[[v, j, 0]] += 1.0;
        }
    }
    let terms = reprojection_loss(
        &joints,
        &cams,
        &shifted,
        &sample.flags,
        &cfg,
        sample.image_size(),
    )
    .unwrap();
    assert!((terms.raw - 1.0).abs() <= 1e-9, "raw {}", terms.raw);
}

#[test]
fn reprojection_weighting_single_vs_multi_is_one_to_ten() {
    let cfg = LossConfig::default();
    let (sample, _t) = consistent_sample(9, (2, 2));
    let joints = Tensor::constant(sample.joints3d.clone().into_dyn());
    // Same per-view geometry, as S=1 and as S=2 (view duplicated).
    let cam0 = CameraPredT::from_encoding(&sample.cams[0]);
    let mut shifted = sample.joints2d.clone();
    for v in 0..2 {
        for j in 0..21 {
            shifted[[v, j, 1]] += 2.0;
        }
    }
    let dup2 = Array3::from_shape_fn((2, 21, 2), |(_, j, a)| shifted[[0, j, a]]);
    let one = Array3::from_shape_fn((1, 21, 2), |(_, j, a)| shifted[[0, j, a]]);

    let single = reprojection_loss(
        &joints,
        std::slice::from_ref(&cam0),
        &one,
        &SupervisionFlags::joints2d_only(false),
        &cfg,
        sample.image_size(),
    )
    .unwrap();
    let multi = reprojection_loss(
        &joints,
        &[cam0.clone(), cam0.clone()],
        &dup2,
        &SupervisionFlags::full(true),
        &cfg,
        sample.image_size(),
    )
    .unwrap();
    assert!((single.raw - multi.raw).abs() < 1e-12);
    let ratio = multi.weighted.scalar() / single.weighted.scalar();
    assert!((ratio - 10.0).abs() < 1e-9, "weighted ratio {ratio}");
}

#[test]
fn negative_depth_penalty_examples() {
    // All positive -> 0; one depth of -2 among 2 views x 21 joints -> 4/42;
    // raising any depth never increases the penalty.
    let pos = vec![
        Tensor::constant(Array2::from_elem((21, 1), 0.5).into_dyn()),
        Tensor::constant(Array2::from_elem((21, 1), 1.5).into_dyn()),
    ];
    assert_eq!(negative_depth_penalty(&pos).scalar(), 0.0);

    let mut with_neg = Array2::from_elem((21, 1), 0.5);
    with_neg[[7, 0]] = -2.0;
    let depths = vec![
        Tensor::constant(with_neg.clone().into_dyn()),
        Tensor::constant(Array2::from_elem((21, 1), 0.9).into_dyn()),
    ];
    let got = negative_depth_penalty(&depths).scalar();
    assert!((got - 4.0 / 42.0).abs() < 1e-12, "penalty {got}");

    let mut raised = with_neg;
    raised[[7, 0]] = -1.0;
    let depths2 = vec![
        Tensor::constant(raised.into_dyn()),
        Tensor::constant(Array2::from_elem((21, 1), 0.9).into_dyn()),
    ];
    assert!(negative_depth_penalty(&depths2).scalar() < got);
}

// ---------------------------------------------------------------------------
// total loss
// ---------------------------------------------------------------------------

fn synthetic_output(sample: &MultiViewSample, blocks: usize, rng: &mut SeededRng) -> ModelOutput {
    let per_block: Vec<(HandParams, Vec<CameraEncoding>)> = (0..blocks)
        .map(|_| {
            let hand = random_hand(rng);
            let cams: Vec<CameraEncoding> = (0..sample.view_count())
                .map(|v| {
                    if v == 0 {
                        CameraEncoding::identity([1.0, 1.1])
                    } else {
                        random_cam(rng)
                    }
                })
                .collect();
            (hand, cams)
        })
        .collect();
    ModelOutput::from_values(&per_block)
}

#[test]
fn stage_weights_follow_gamma_powers() {
    let w = stage_weights(4, 0.6);
    let expect = [0.216, 0.36, 0.6, 1.0];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    // gamma = 1 is the constant-weights variant.
    assert_eq!(stage_weights(4, 1.0), vec![1.0; 4]);
}

#[test]
fn total_loss_is_the_stage_weighted_combination_of_its_parts() {
    let (sample, t) = consistent_sample(10, (3, 3));
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(200);
    let output = synthetic_output(&sample, 4, &mut rng);
    let (tensor_total, report) = total_loss(&output, &sample, &t, &cfg).unwrap();
    assert!((report.recombine(&cfg) - report.total).abs() <= 1e-6);
    assert_eq!(tensor_total.scalar(), report.total);
    // Every reported term is non-negative.
    for b in &report.blocks {
        for v in [b.hand_pose, b.hand_shape, b.hand_j3d, b.cam_t, b.cam_r, b.cam_f] {
            assert!(v >= 0.0);
        }
    }
    assert!(report.reproj >= 0.0 && report.neg_depth >= 0.0);
}

#[test]
fn projection_terms_depend_only_on_the_final_block() {
    let (sample, t) = consistent_sample(11, (2, 3));
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(201);
    let base = synthetic_output(&sample, 4, &mut rng);
    let (_, base_report) = total_loss(&base, &sample, &t, &cfg).unwrap();

    // Perturb every non-final block; the projection terms must not move.
    let mut rng2 = SeededRng::new(999);
    let mut blocks: Vec<(HandParams, Vec<CameraEncoding>)> = Vec::new();
    for (i, b) in base.blocks.iter().enumerate() {
        let hand = b.hand.values();
        let cams: Vec<CameraEncoding> =
            b.cams.iter().map(|c| c.encoding().unwrap()).collect();
        if i + 1 < 4 {
            blocks.push((random_hand(&mut rng2), cams));
        } else {
            blocks.push((hand, cams));
        }
    }
    let perturbed = ModelOutput::from_values(&blocks);
    let (_, new_report) = total_loss(&perturbed, &sample, &t, &cfg).unwrap();
    assert_eq!(base_report.reproj, new_report.reproj);
    assert_eq!(base_report.neg_depth, new_report.neg_depth);
    // ...while the intermediate hand terms did move.
    assert_ne!(base_report.blocks[0].hand_pose, new_report.blocks[0].hand_pose);
}

#[test]
fn total_loss_zero_for_perfect_predictions_and_rejects_block_mismatch() {
    let (sample, t) = consistent_sample(12, (2, 3));
    let cfg = LossConfig::default();
    let gt_joints = forward_joints(&sample.hand, &t).unwrap();
    assert!((&gt_joints - &sample.joints3d)
        .iter()
        .all(|d| d.abs() < 1e-9));
    let perfect: Vec<(HandParams, Vec<CameraEncoding>)> = (0..4)
        .map(|_| (sample.hand.clone(), sample.cams.clone()))
        .collect();
    let output = ModelOutput::from_values(&perfect);
    let (_, report) = total_loss(&output, &sample, &t, &cfg).unwrap();
    assert!(report.total.abs() <= 1e-6, "perfect prediction loss {}", report.total);

    let three = ModelOutput::from_values(&perfect[..3]);
    assert!(total_loss(&three, &sample, &t, &cfg).is_err());
}

#[test]
fn total_loss_invariant_to_quaternion_negation() {
    let (sample, t) = consistent_sample(13, (3, 3));
    let cfg = LossConfig::default();
    let mut rng = SeededRng::new(202);
    let output = synthetic_output(&sample, 4, &mut rng);
    let (_, base) = total_loss(&output, &sample, &t, &cfg).unwrap();

    let flipped = ModelOutput {
        blocks: output
            .blocks
            .iter()
            .map(|b| BlockPrediction {
                hand: HandParamsT::from_values(&b.hand.values()),
                cams: b
                    .cams
                    .iter()
                    .map(|c| CameraPredT {
                        t: Tensor::constant(c.t.value().clone()),
                        q_raw: Tensor::constant(c.q_raw.value().mapv(|v| -v)),
                        fov: Tensor::constant(c.fov.value().clone()),
                    })
                    .collect(),
            })
            .collect(),
    };
    let (_, neg) = total_loss(&flipped, &sample, &t, &cfg).unwrap();
    assert_eq!(base.total, neg.total, "q and -q are the same rotation");
}

#[test]
fn total_loss_gradients_match_finite_differences_at_head_outputs() {
    // d(total)/d(head outputs) vs central differences at 5 random configs.
    let (sample, t) = consistent_sample(14, (2, 2));
    let cfg = LossConfig {
        blocks: 2,
        ..Default::default()
    };
    let mut rng = SeededRng::new(203);
    for _ in 0..5 {
        let hands: Vec<HandParams> = (0..2).map(|_| random_hand(&mut rng)).collect();
        let cams: Vec<Vec<CameraEncoding>> = (0..2)
            .map(|_| {
                (0..sample.view_count())
                    .map(|v| {
                        if v == 0 {
                            CameraEncoding::identity([1.0, 1.0])
                        } else {
                            random_cam(&mut rng)
                        }
                    })
                    .collect()
            })
            .collect();

        // Differentiable leaves for the final block's head outputs.
        let build = |theta: &[f64], tv: &[f64], qv: &[f64], fv: &[f64]| {
            let blocks: Vec<BlockPrediction> = (0..2)
                .map(|i| {
                    let mut hand = hands[i].clone();
                    let mut cam_encs = cams[i].clone();
                    if i == 1 {
                        hand.theta = theta.to_vec();
                        cam_encs[1].t = [tv[0], tv[1], tv[2]];
                    }
                    let hand_t = if i == 1 {
                        HandParamsT {
                            theta: Tensor::variable(Array1::from_vec(hand.theta.clone()).into_dyn()),
                            beta: Tensor::constant(Array1::from_vec(hand.beta.clone()).into_dyn()),
                            trans: Tensor::constant(
                                Array1::from_vec(hand.trans.to_vec()).into_dyn(),
                            ),
                        }
                    } else {
                        HandParamsT::from_values(&hand)
                    };
                    let cams_t: Vec<CameraPredT> = cam_encs
                        .iter()
                        .enumerate()
                        .map(|(v, c)| {
                            if i == 1 && v == 1 {
                                CameraPredT {
                                    t: Tensor::variable(
                                        Array1::from_vec(tv.to_vec()).into_dyn(),
                                    ),
                                    q_raw: Tensor::variable(
                                        Array1::from_vec(qv.to_vec()).into_dyn(),
                                    ),
                                    fov: Tensor::variable(
                                        Array1::from_vec(fv.to_vec()).into_dyn(),
                                    ),
                                }
                            } else {
                                CameraPredT::from_encoding(c)
                            }
                        })
                        .collect();
                    BlockPrediction {
                        hand: hand_t,
                        cams: cams_t,
                    }
                })
                .collect();
            ModelOutput { blocks }
        };

        let theta0 = hands[1].theta.clone();
        let t0 = cams[1][1].t.to_vec();
        let q0 = cams[1][1].q.to_vec();
        let f0 = cams[1][1].fov.to_vec();

        let output = build(&theta0, &t0, &q0, &f0);
        let (loss, _) = total_loss(&output, &sample, &t, &cfg).unwrap();
        loss.backward();
        let final_block = &output.blocks[1];
        let leaves: Vec<(&Tensor, usize)> = vec![
            (&final_block.hand.theta, 0),
            (&final_block.cams[1].t, 1),
            (&final_block.cams[1].q_raw, 2),
            (&final_block.cams[1].fov, 3),
        ];
        for (leaf, which) in leaves {
            let analytic: Vec<f64> = leaf.grad().unwrap().iter().cloned().collect();
            let x0: Vec<f64> = leaf.value().iter().cloned().collect();
            let numeric = fd::central_diff(
                |x| {
                    let (th, tv, qv, fv) = match which {
                        0 => (x.to_vec(), t0.clone(), q0.clone(), f0.clone()),
                        1 => (theta0.clone(), x.to_vec(), q0.clone(), f0.clone()),
                        2 => (theta0.clone(), t0.clone(), x.to_vec(), f0.clone()),
                        _ => (theta0.clone(), t0.clone(), q0.clone(), x.to_vec()),
                    };
                    let out = build(&th, &tv, &qv, &fv);
                    total_loss(&out, &sample, &t, &cfg).unwrap().1.total
                },
                &x0,
                1e-5,
            );
            let err = fd::max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-4, "total_loss grad rel err {err} (leaf {which})");
        }
    }
}
