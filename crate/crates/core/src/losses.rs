//! The training objective.
//!
//! Four terms, each differentiable end to end:
//!
//! - hand loss: squared errors on pose/shape parameters and root-relative 3D
//!   joints, gated per sample by availability indicators;
//! - camera loss: per-view translation, squared geodesic rotation angle, and
//!   field-of-view errors, active only for multi-view samples;
//! - reprojection loss: squared pixel distance between the predicted 3D joints
//!   projected through the predicted cameras and the ground-truth 2D joints;
//! - negative-depth penalty: squared hinge on points behind any camera.
//!
//! The total applies hand and camera losses to every refinement block with
//! exponentially increasing stage weights gamma^(L-l), and the projection
//! terms to the final block only.
//!
//! Reduction conventions: norms over coordinate axes (3-vector translations,
//! 2-vector pixels/FoV) are sums, matching the squared-norm notation; all
//! collection axes (views, joints, parameter vectors) are means, so weights do
//! not depend on view or joint counts. A gated-off term is an exact constant
//! zero that contributes no gradient.

use crate::camera::{fov_to_focal_t, geodesic_t, quat_to_rotmat_t, CameraEncoding};
use crate::data::MultiViewSample;
use crate::error::{Error, Result};
use crate::hand::{HandParams, HandParamsT, HandTemplate};
use crate::network::{CameraPredT, ModelOutput};
use crate::tensor::Tensor;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Ground-truth availability indicators for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionFlags {
    pub has_mano: bool,
    pub has_joints3d: bool,
    pub has_joints2d: bool,
    pub is_multiview: bool,
}

impl SupervisionFlags {
    pub fn full(is_multiview: bool) -> Self {
        Self {
            has_mano: true,
            has_joints3d: true,
            has_joints2d: true,
            is_multiview,
        }
    }

    /// The weak-supervision regime: 2D keypoints only.
    pub fn joints2d_only(is_multiview: bool) -> Self {
        Self {
            has_mano: false,
            has_joints3d: false,
            has_joints2d: true,
            is_multiview,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Stage-weight base for intermediate supervision.
    pub gamma: f64,
    /// Refinement block count L the model output must match.
    pub blocks: usize,
    pub lambda_hand: f64,
    pub lambda_cam: f64,
    pub lambda_proj: f64,
    pub w_pose: f64,
    pub w_shape: f64,
    pub w_joints3d: f64,
    pub w_reproj_single: f64,
    pub w_reproj_multi: f64,
    pub w_neg_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            blocks: 4,
            lambda_hand: 1.0,
            lambda_cam: 5.0,
            lambda_proj: 1.0,
            w_pose: 0.1,
            w_shape: 0.05,
            w_joints3d: 5.0,
            w_reproj_single: 1.0,
            w_reproj_multi: 10.0,
            w_neg_depth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_hand,
            self.lambda_cam,
            self.lambda_proj,
            self.w_pose,
            self.w_shape,
            self.w_joints3d,
            self.w_reproj_single,
            self.w_reproj_multi,
            self.w_neg_depth,
        ];
        if !weights.iter().all(|&w| w >= 0.0 && w.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be at least 1".into()));
        }
        Ok(())
    }

    pub fn reproj_weight(&self, is_multiview: bool) -> f64 {
        if is_multiview {
            self.w_reproj_multi
        } else {
            self.w_reproj_single
        }
    }
}

/// Stage weights gamma^(L-l) for blocks l = 1..=L.
pub fn stage_weights(blocks: usize, gamma: f64) -> Vec<f64> {
    (1..=blocks).map(|l| gamma.powi((blocks - l) as i32)).collect()
}

/// Raw (unweighted) per-term values of one block, for logging and recombination.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockLossParts {
    pub hand_pose: f64,
    pub hand_shape: f64,
    pub hand_j3d: f64,
    pub cam_t: f64,
    pub cam_r: f64,
    pub cam_f: f64,
}

/// Loss values for one sample; `total` is the full objective, the parts are
/// raw per-term values before any lambda/sub-weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub blocks: Vec<BlockLossParts>,
    pub reproj: f64,
    pub neg_depth: f64,
    pub views: usize,
    pub flags: SupervisionFlags,
}

impl LossReport {
    /// Re-evaluate the total from the recorded parts; must match `total`.
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        let gammas = stage_weights(self.blocks.len(), cfg.gamma);
        let mut total = 0.0;
        for (parts, g) in self.blocks.iter().zip(&gammas) {
            let hand = cfg.w_pose * parts.hand_pose
                + cfg.w_shape * parts.hand_shape
                + cfg.w_joints3d * parts.hand_j3d;
            let cam = parts.cam_t + parts.cam_r + parts.cam_f;
            total += g * (cfg.lambda_hand * hand + cfg.lambda_cam * cam);
        }
        total
            + cfg.lambda_proj
                * (cfg.reproj_weight(self.flags.is_multiview) * self.reproj
                    + cfg.w_neg_depth * self.neg_depth)
    }

    /// Flat key/value record for the JSON-lines training log.
    pub fn flat_record(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        let num =
            |v: f64| serde_json::Value::Number(serde_json::Number::from_f64(v).unwrap());
        m.insert("total".into(), num(self.total));
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            m.insert(format!("hand_pose_l{l}"), num(b.hand_pose));
            m.insert(format!("hand_shape_l{l}"), num(b.hand_shape));
            m.insert(format!("hand_j3d_l{l}"), num(b.hand_j3d));
            m.insert(format!("cam_t_l{l}"), num(b.cam_t));
            m.insert(format!("cam_r_l{l}"), num(b.cam_r));
            m.insert(format!("cam_f_l{l}"), num(b.cam_f));
        }
        m.insert("reproj".into(), num(self.reproj));
        m.insert("neg_depth".into(), num(self.neg_depth));
        m.insert("views".into(), serde_json::Value::from(self.views));
        m
    }
}

fn zero() -> Tensor {
    Tensor::scalar_value(0.0)
}

/// Mean squared difference between a tensor and plain values of equal length.
fn mse_against(pred: &Tensor, gt: &[f64]) -> Tensor {
    let gt_t = Tensor::constant(ndarray::Array1::from_vec(gt.to_vec()).into_dyn());
    pred.sub(&gt_t).square().mean_all()
}

pub struct HandLossTerms {
    pub weighted: Tensor, // 0-d: w_pose*pose + w_shape*shape + w_j3d*j3d
    pub parts: (f64, f64, f64),
}

/// Hand loss on one block's prediction. `pred_joints` are absolute predicted
/// joints [21, 3]; the 3D term compares root-relative coordinates on both
/// sides. Gated terms are exact constant zeros.
pub fn hand_loss(
    pred: &HandParamsT,
    pred_joints: &Tensor,
    gt: &HandParams,
    gt_joints: &Array2<f64>,
    flags: &SupervisionFlags,
    cfg: &LossConfig,
) -> Result<HandLossTerms> {
    gt.validate()?;
    if pred_joints.shape() != [21, 3] || gt_joints.shape() != [21, 3] {
        return Err(Error::shape(
            "hand_loss joints",
            "21 x 3",
            format!("{:?} / {:?}", pred_joints.shape(), gt_joints.shape()),
        ));
    }

    let (pose, shape) = if flags.has_mano {
        (
            mse_against(&pred.theta, &gt.theta),
            mse_against(&pred.beta, &gt.beta),
        )
    } else {
        (zero(), zero())
    };

    let j3d = if flags.has_joints3d {
        let pred_rr = pred_joints.sub_row(&pred_joints.slice_rows(0, 1).reshape(&[3]));
        let mut gt_rr = gt_joints.clone();
        let root = gt_rr.row(0).to_owned();
        for mut r in gt_rr.rows_mut() {
            r -= &root;
        }
        pred_rr
            .sub(&Tensor::constant(gt_rr.into_dyn()))
            .square()
            .mean_all()
    } else {
        zero()
    };

    let weighted = pose
        .mul_scalar(cfg.w_pose)
        .add(&shape.mul_scalar(cfg.w_shape))
        .add(&j3d.mul_scalar(cfg.w_joints3d));
    Ok(HandLossTerms {
        weighted,
        parts: (pose.scalar(), shape.scalar(), j3d.scalar()),
    })
}

pub struct CameraLossTerms {
    pub scaled: Tensor, // 0-d: lambda_cam * mean over views of (t + r^2 + f)
    pub parts: (f64, f64, f64),
}

/// Camera loss over all views (including the identity reference view, whose
/// pose terms are exactly zero). Single-view samples get an exact zero, by
/// definition rather than as an error, so callers need no branching.
pub fn camera_loss(
    pred: &[CameraPredT],
    gt: &[CameraEncoding],
    cfg: &LossConfig,
) -> Result<CameraLossTerms> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "camera_loss",
            format!("{} views", gt.len()),
            format!("{} views", pred.len()),
        ));
    }
    if pred.len() <= 1 {
        return Ok(CameraLossTerms {
            scaled: zero(),
            parts: (0.0, 0.0, 0.0),
        });
    }
    let s = pred.len();
    let mut t_sum = zero();
    let mut r_sum = zero();
    let mut f_sum = zero();
    for (p, g) in pred.iter().zip(gt) {
        g.validate()?;
        let t_err = p
            .t
            .sub(&Tensor::constant(ndarray::arr1(&g.t).into_dyn()))
            .square()
            .sum_all();
        let rot_pred = quat_to_rotmat_t(&p.q_raw);
        let rot_gt = Tensor::constant(
            ndarray::arr2(&g.rotation()?).into_dyn(),
        );
        let angle = geodesic_t(&rot_pred, &rot_gt);
        let f_err = p
            .fov
            .sub(&Tensor::constant(ndarray::arr1(&g.fov).into_dyn()))
            .square()
            .sum_all();
        t_sum = t_sum.add(&t_err);
        r_sum = r_sum.add(&angle.square());
        f_sum = f_sum.add(&f_err);
    }
    let inv_s = 1.0 / s as f64;
    let t_mean = t_sum.mul_scalar(inv_s);
    let r_mean = r_sum.mul_scalar(inv_s);
    let f_mean = f_sum.mul_scalar(inv_s);
    let parts = (t_mean.scalar(), r_mean.scalar(), f_mean.scalar());
    let scaled = t_mean
        .add(&r_mean)
        .add(&f_mean)
        .mul_scalar(cfg.lambda_cam);
    Ok(CameraLossTerms { scaled, parts })
}

pub struct ReprojTerms {
    /// 0-d: sub-weighted mean squared pixel distance.
    pub weighted: Tensor,
    /// Raw mean squared pixel distance (with per-joint caps applied).
    pub raw: f64,
    /// Per-view depth columns [21, 1], for the negative-depth penalty.
    pub depths: Vec<Tensor>,
}

/// Penalty applied in place of the squared pixel error when a projection is
/// degenerate (non-finite pixels from near-zero depth).
const DEGENERATE_PIXEL_PENALTY: f64 = 1e4;

/// Reprojection loss: predicted 3D joints through predicted cameras vs
/// ground-truth 2D, averaged over views and joints. Joints whose projection is
/// non-finite contribute a constant capped penalty instead of NaN.
pub fn reprojection_loss(
    pred_joints3d: &Tensor,
    pred_cams: &[CameraPredT],
    gt_joints2d: &Array3<f64>,
    flags: &SupervisionFlags,
    cfg: &LossConfig,
    image_size: (usize, usize),
) -> Result<ReprojTerms> {
    let s = pred_cams.len();
    if pred_joints3d.shape() != [21, 3] {
        return Err(Error::shape(
            "reprojection_loss joints",
            "21 x 3",
            format!("{:?}", pred_joints3d.shape()),
        ));
    }
    if gt_joints2d.shape() != [s, 21, 2] {
        return Err(Error::shape(
            "reprojection_loss joints2d",
            format!("{s} x 21 x 2"),
            format!("{:?}", gt_joints2d.shape()),
        ));
    }
    let (h, w) = image_size;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);

    let mut depths = Vec::with_capacity(s);
    let mut view_sums: Vec<Tensor> = Vec::with_capacity(s);
    for (v, cam) in pred_cams.iter().enumerate() {
        let rot = quat_to_rotmat_t(&cam.q_raw);
        let focal = fov_to_focal_t(&cam.fov, w, h);
        let (px, z) = crate::camera::project_t(pred_joints3d, &rot, &cam.t, &focal, cx, cy);
        depths.push(z);
        if !flags.has_joints2d {
            continue;
        }
        let gt_view = gt_joints2d.index_axis(ndarray::Axis(0), v).to_owned();
        let diff = px.sub(&Tensor::constant(gt_view.into_dyn()));
        let sq = diff.square();
        // Row sums: [21, 2] @ [2, 1] -> per-joint squared pixel distance.
        let ones2 = Tensor::constant(Array2::<f64>::ones((2, 1)).into_dyn());
        let per_joint = sq.matmul(&ones2);
        let finite = per_joint.value().iter().all(|v| v.is_finite());
        if finite {
            view_sums.push(per_joint.sum_all());
        } else {
            // Replace only the degenerate joints; the rest keep gradients.
            let mut pieces = Vec::with_capacity(21);
            for j in 0..21 {
                if per_joint.value()[[j, 0]].is_finite() {
                    pieces.push(per_joint.slice_rows(j, 1).sum_all());
                } else {
                    pieces.push(Tensor::scalar_value(DEGENERATE_PIXEL_PENALTY));
                }
            }
            let mut acc = zero();
            for p in pieces {
                acc = acc.add(&p);
            }
            view_sums.push(acc);
        }
    }

    let raw_t = if flags.has_joints2d {
        let mut acc = zero();
        for vs in view_sums {
            acc = acc.add(&vs);
        }
        acc.mul_scalar(1.0 / (s as f64 * 21.0))
    } else {
        zero()
    };
    let raw = raw_t.scalar();
    let weighted = raw_t.mul_scalar(cfg.reproj_weight(flags.is_multiview));
    Ok(ReprojTerms {
        weighted,
        raw,
        depths,
    })
}

/// Mean squared hinge on negative depths: mean over all views and joints of
/// max(0, -z)^2. Zero iff every depth is non-negative.
pub fn negative_depth_penalty(depths: &[Tensor]) -> Tensor {
    let all = Tensor::concat_rows(depths);
    all.neg().relu().square().mean_all()
}

/// The full objective for one sample.
pub fn total_loss(
    output: &ModelOutput,
    sample: &MultiViewSample,
    template: &HandTemplate,
    cfg: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    cfg.validate()?;
    if output.blocks.len() != cfg.blocks {
        return Err(Error::shape(
            "total_loss blocks",
            cfg.blocks.to_string(),
            output.blocks.len().to_string(),
        ));
    }
    let s = sample.view_count();
    for block in &output.blocks {
        if block.cams.len() != s {
            return Err(Error::shape(
                "total_loss cameras",
                format!("{s} views"),
                format!("{} views", block.cams.len()),
            ));
        }
    }
    let flags = &sample.flags;
    let gammas = stage_weights(cfg.blocks, cfg.gamma);

    let mut total = zero();
    let mut block_parts = Vec::with_capacity(cfg.blocks);
    let mut final_joints: Option<Tensor> = None;

    for (i, (block, g)) in output.blocks.iter().zip(&gammas).enumerate() {
        let is_final = i + 1 == cfg.blocks;
        let need_joints = flags.has_joints3d || (is_final && flags.has_joints2d);
        let joints = if need_joints {
            Some(crate::hand::forward_t(&block.hand, template, false).0)
        } else {
            None
        };

        let hand = match &joints {
            Some(j) => hand_loss(&block.hand, j, &sample.hand, &sample.joints3d, flags, cfg)?,
            None => {
                // 3D joints not needed: pose/shape terms still apply when
                // MANO ground truth exists.
                let dummy = Tensor::constant(Array2::<f64>::zeros((21, 3)).into_dyn());
                let mut f = *flags;
                f.has_joints3d = false;
                hand_loss(&block.hand, &dummy, &sample.hand, &sample.joints3d, &f, cfg)?
            }
        };
        let cam = camera_loss(&block.cams, &sample.cams, cfg)?;
        total = total.add(
            &hand
                .weighted
                .mul_scalar(cfg.lambda_hand)
                .add(&cam.scaled)
                .mul_scalar(*g),
        );
        block_parts.push(BlockLossParts {
            hand_pose: hand.parts.0,
            hand_shape: hand.parts.1,
            hand_j3d: hand.parts.2,
            cam_t: cam.parts.0,
            cam_r: cam.parts.1,
            cam_f: cam.parts.2,
        });
        if is_final {
            final_joints = joints;
        }
    }

    // Projection terms: final block only.
    let (reproj_raw, neg_raw) = if flags.has_joints2d {
        let joints = final_joints.expect("final joints built when has_joints2d");
        let final_block = output.final_block();
        let reproj = reprojection_loss(
            &joints,
            &final_block.cams,
            &sample.joints2d,
            flags,
            cfg,
            sample.image_size(),
        )?;
        let neg = negative_depth_penalty(&reproj.depths);
        let neg_raw = neg.scalar();
        total = total.add(
            &reproj
                .weighted
                .add(&neg.mul_scalar(cfg.w_neg_depth))
                .mul_scalar(cfg.lambda_proj),
        );
        (reproj.raw, neg_raw)
    } else {
        (0.0, 0.0)
    };

    let report = LossReport {
        total: total.scalar(),
        blocks: block_parts,
        reproj: reproj_raw,
        neg_depth: neg_raw,
        views: s,
        flags: *flags,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok((total, report))
}
