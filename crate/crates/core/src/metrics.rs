//! Evaluation metrics: root-relative and Procrustes-aligned MPJPE/MPVPE in
//! millimeters, and the area under the PCK curve.
//!
//! The absolute wrist depth is unobservable from uncalibrated views, so errors
//! are reported after root-relative alignment (wrist subtracted) and after
//! Procrustes analysis (optimal similarity transform). AUC pools per-point
//! errors across the whole evaluation set before integrating the PCK curve.

use crate::data::MultiViewSample;
use crate::error::{Error, Result};
use crate::hand::{forward, HandTemplate};
use crate::network::Model;
use crate::par;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const MM_PER_M: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rr_mpjpe_mm: f64,
    pub rr_mpvpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pa_mpvpe_mm: f64,
    pub auc_j: f64,
    pub auc_v: f64,
    /// PCK threshold ceiling the AUCs were integrated to, millimeters.
    pub auc_threshold_mm: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// PCK-AUC threshold ceiling in millimeters (20 or 50 in common use).
    pub auc_threshold_mm: f64,
    pub auc_steps: usize,
    /// Procrustes with uniform scale (similarity) when true, rigid otherwise.
    pub pa_with_scale: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            auc_threshold_mm: 50.0,
            auc_steps: 100,
            pa_with_scale: true,
        }
    }
}

/// Subtract the root point from every point.
pub fn root_relative(points: &Array2<f64>, root_index: usize) -> Result<Array2<f64>> {
    if root_index >= points.nrows() {
        return Err(Error::invalid(format!(
            "root index {root_index} out of range for {} points",
            points.nrows()
        )));
    }
    let root = points.row(root_index).to_owned();
    let mut out = points.clone();
    for mut r in out.rows_mut() {
        r -= &root;
    }
    Ok(out)
}

/// Align `pred` to `gt` with the similarity transform (rotation via SVD with
/// reflection correction, optional uniform scale, translation to centroids)
/// minimizing the summed squared residuals. Returns the aligned copy of
/// `pred`.
pub fn procrustes_align(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    with_scale: bool,
) -> Result<Array2<f64>> {
    if pred.shape() != gt.shape() || pred.ncols() != 3 {
        return Err(Error::shape(
            "procrustes_align",
            "matching N x 3",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let n = pred.nrows();
    if n < 3 {
        return Err(Error::invalid("procrustes_align needs at least 3 points"));
    }
    let mean = |a: &Array2<f64>| {
        let mut m = [0.0; 3];
        for r in a.rows() {
            for (i, mi) in m.iter_mut().enumerate() {
                *mi += r[i];
            }
        }
        m.map(|v| v / n as f64)
    };
    let mp = mean(pred);
    let mg = mean(gt);

    // Centered clouds and the 3x3 cross-covariance H = X^T Y.
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    let mut pred_var = 0.0;
    for (rp, rg) in pred.rows().into_iter().zip(gt.rows()) {
        let x = [rp[0] - mp[0], rp[1] - mp[1], rp[2] - mp[2]];
        let y = [rg[0] - mg[0], rg[1] - mg[1], rg[2] - mg[2]];
        pred_var += x.iter().map(|v| v * v).sum::<f64>();
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] += x[i] * y[j];
            }
        }
    }
    if pred_var < 1e-12 {
        return Err(Error::invalid(
            "procrustes_align: degenerate prediction cloud (zero variance)",
        ));
    }

    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u.ok_or_else(|| Error::invalid("SVD failed"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("SVD failed"))?;
    let v = v_t.transpose();
    // Reflection correction keeps the rotation proper.
    let det = (v * u.transpose()).determinant();
    let d = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
        1.0,
        1.0,
        if det < 0.0 { -1.0 } else { 1.0 },
    ));
    let rot = v * d * u.transpose();
    let corrected_trace = svd.singular_values[0] + svd.singular_values[1]
        + if det < 0.0 {
            -svd.singular_values[2]
        } else {
            svd.singular_values[2]
        };
    let scale = if with_scale {
        corrected_trace / pred_var
    } else {
        1.0
    };

    let mut out = Array2::<f64>::zeros((n, 3));
    for (i, rp) in pred.rows().into_iter().enumerate() {
        let x = [rp[0] - mp[0], rp[1] - mp[1], rp[2] - mp[2]];
        for r in 0..3 {
            let rotated: f64 = (0..3).map(|c| rot[(r, c)] * x[c]).sum();
            out[[i, r]] = scale * rotated + mg[r];
        }
    }
    Ok(out)
}

/// Per-point Euclidean distances in millimeters.
pub fn per_point_errors_mm(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "position_error",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    Ok(pred
        .rows()
        .into_iter()
        .zip(gt.rows())
        .map(|(a, b)| {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .sqrt()
                * MM_PER_M;
            // Sub-picometer distances are alignment roundoff, not error;
            // snapping them keeps PCK(0) exact for coincident clouds.
            if d < 1e-9 {
                0.0
            } else {
                d
            }
        })
        .collect())
}

/// Mean per-point position error, millimeters.
pub fn position_error_mm(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let e = per_point_errors_mm(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Normalized area under the PCK curve: PCK evaluated at `steps` uniform
/// thresholds in [0, max_threshold_mm], integrated by the trapezoid rule and
/// divided by the ceiling so the result lies in [0, 1].
pub fn pck_auc(errors_mm: &[f64], max_threshold_mm: f64, steps: usize) -> Result<f64> {
    if errors_mm.is_empty() {
        return Err(Error::invalid("pck_auc: empty error list"));
    }
    if max_threshold_mm <= 0.0 || steps < 2 {
        return Err(Error::invalid("pck_auc: need max_threshold > 0 and steps >= 2"));
    }
    let n = errors_mm.len() as f64;
    let pck = |tau: f64| errors_mm.iter().filter(|&&e| e <= tau).count() as f64 / n;
    // Uniform spacing: the normalized trapezoid integral reduces to the mean
    // of the PCK values with half weight on the endpoints. This form is exact
    // (an all-correct curve integrates to exactly 1).
    let dt = max_threshold_mm / (steps - 1) as f64;
    let mut weighted = 0.0;
    for k in 0..steps {
        let p = pck(dt * k as f64);
        weighted += if k == 0 || k == steps - 1 { 0.5 * p } else { p };
    }
    Ok(weighted / (steps - 1) as f64)
}

/// Predicted geometry for one sample, as consumed by the aggregate evaluator.
pub struct PredictedGeometry {
    pub joints: Array2<f64>,
    pub vertices: Array2<f64>,
}

/// Aggregate metrics for a set of (prediction, ground truth) pairs. Ground
/// truth geometry is posed through the same template. Per-point errors are
/// pooled across samples before the AUC integration.
pub fn evaluate_pairs(
    preds: &[PredictedGeometry],
    gts: &[&MultiViewSample],
    template: &HandTemplate,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid("evaluate_pairs: empty or mismatched inputs"));
    }
    let mut rr_j = Vec::new();
    let mut rr_v = Vec::new();
    let mut pa_j = Vec::new();
    let mut pa_v = Vec::new();
    for (pred, sample) in preds.iter().zip(gts) {
        let gt = forward(&sample.hand, template)?;
        let rr_pred_j = root_relative(&pred.joints, 0)?;
        let rr_gt_j = root_relative(&gt.joints, 0)?;
        rr_j.extend(per_point_errors_mm(&rr_pred_j, &rr_gt_j)?);
        // Vertex clouds are root-relative to the wrist joint as well.
        let rr_pred_v = shift_by_root(&pred.vertices, &pred.joints)?;
        let rr_gt_v = shift_by_root(&gt.vertices, &gt.joints)?;
        rr_v.extend(per_point_errors_mm(&rr_pred_v, &rr_gt_v)?);

        let pa_pred_j = procrustes_align(&pred.joints, &gt.joints, cfg.pa_with_scale)?;
        pa_j.extend(per_point_errors_mm(&pa_pred_j, &gt.joints)?);
        let pa_pred_v = procrustes_align(&pred.vertices, &gt.vertices, cfg.pa_with_scale)?;
        pa_v.extend(per_point_errors_mm(&pa_pred_v, &gt.vertices)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricReport {
        rr_mpjpe_mm: mean(&rr_j),
        rr_mpvpe_mm: mean(&rr_v),
        pa_mpjpe_mm: mean(&pa_j),
        pa_mpvpe_mm: mean(&pa_v),
        auc_j: pck_auc(&pa_j, cfg.auc_threshold_mm, cfg.auc_steps)?,
        auc_v: pck_auc(&pa_v, cfg.auc_threshold_mm, cfg.auc_steps)?,
        auc_threshold_mm: cfg.auc_threshold_mm,
        samples: preds.len(),
    })
}

fn shift_by_root(points: &Array2<f64>, joints: &Array2<f64>) -> Result<Array2<f64>> {
    let root = joints.row(0).to_owned();
    let mut out = points.clone();
    for mut r in out.rows_mut() {
        r -= &root;
    }
    Ok(out)
}

/// Run the model on every sample (in parallel) and evaluate the final-block
/// predictions against ground truth.
pub fn evaluate_model(
    model: &Model,
    template: &HandTemplate,
    samples: &[MultiViewSample],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate_model: no samples"));
    }
    let preds: Vec<Result<PredictedGeometry>> = par::map_ordered(samples, |sample| {
        let (out, _tape) = model.forward_full(&sample.images_f64())?;
        let (hand, _cams) = out.final_values()?;
        let geo = forward(&hand, template)?;
        Ok(PredictedGeometry {
            joints: geo.joints,
            vertices: geo.vertices,
        })
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MultiViewSample> = samples.iter().collect();
    evaluate_pairs(&preds, &refs, template, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{axis_angle_to_rotmat, mat3_vec};
    use crate::rng::SeededRng;

    fn random_cloud(rng: &mut SeededRng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 3), |_| rng.uniform(-0.1, 0.1))
    }

    #[test]
    fn root_relative_basics() {
        let mut rng = SeededRng::new(1);
        let cloud = random_cloud(&mut rng, 21);
        let rr = root_relative(&cloud, 0).unwrap();
        assert_eq!(rr.row(0).sum(), 0.0);

        // Offset cancellation (to fp precision) and idempotence (exact).
        let mut shifted = cloud.clone();
        for mut r in shifted.rows_mut() {
            r += 3.25;
        }
        let rr_shifted = root_relative(&shifted, 0).unwrap();
        for (a, b) in rr_shifted.iter().zip(rr.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(root_relative(&rr, 0).unwrap(), rr);

        assert!(root_relative(&cloud, 21).is_err());
    }

    #[test]
    fn procrustes_identity_and_exact_similarity_recovery() {
        let mut rng = SeededRng::new(2);
        let gt = random_cloud(&mut rng, 21);
        let aligned = procrustes_align(&gt, &gt, true).unwrap();
        assert!(position_error_mm(&aligned, &gt).unwrap() < 1e-9);

        // pred = 2 * Rz(30 deg) * gt + (1, 2, 3): exactly recoverable.
        let r = axis_angle_to_rotmat(&[0.0, 0.0, 30f64.to_radians()]);
        let mut pred = Array2::<f64>::zeros((21, 3));
        for (i, row) in gt.rows().into_iter().enumerate() {
            let p = mat3_vec(&r, &[row[0], row[1], row[2]]);
            pred[[i, 0]] = 2.0 * p[0] + 1.0;
            pred[[i, 1]] = 2.0 * p[1] + 2.0;
            pred[[i, 2]] = 2.0 * p[2] + 3.0;
        }
        let aligned = procrustes_align(&pred, &gt, true).unwrap();
        let resid = position_error_mm(&aligned, &gt).unwrap();
        assert!(resid < 1e-6, "similarity residual {resid} mm");
    }

    #[test]
    fn procrustes_beats_random_similarity_transforms() {
        // Random-search lower-bound oracle: the optimum must not lose to any
        // of 200 random similarity transforms applied to the prediction.
        let mut rng = SeededRng::new(3);
        let gt = random_cloud(&mut rng, 21);
        let mut pred = gt.clone();
        for v in pred.iter_mut() {
            *v += rng.uniform(-0.01, 0.01);
        }
        let aligned = procrustes_align(&pred, &gt, true).unwrap();
        let best = position_error_mm(&aligned, &gt).unwrap();

        for _ in 0..200 {
            let q = crate::camera::random_unit_quat(&mut rng);
            let r = crate::camera::quat_to_rotmat(&q).unwrap();
            let s = rng.uniform(0.5, 2.0);
            let t = [
                rng.uniform(-0.05, 0.05),
                rng.uniform(-0.05, 0.05),
                rng.uniform(-0.05, 0.05),
            ];
            let mut candidate = Array2::<f64>::zeros((21, 3));
            for (i, row) in pred.rows().into_iter().enumerate() {
                let p = mat3_vec(&r, &[row[0], row[1], row[2]]);
                for a in 0..3 {
                    candidate[[i, a]] = s * p[a] + t[a];
                }
            }
            let err = position_error_mm(&candidate, &gt).unwrap();
            assert!(best <= err + 1e-9, "random transform beat Procrustes");
        }
    }

    #[test]
    fn procrustes_result_invariant_under_similarity_of_input() {
        let mut rng = SeededRng::new(4);
        let gt = random_cloud(&mut rng, 21);
        let mut pred = gt.clone();
        for v in pred.iter_mut() {
            *v += rng.uniform(-0.02, 0.02);
        }
        let base = position_error_mm(&procrustes_align(&pred, &gt, true).unwrap(), &gt).unwrap();

        let r = axis_angle_to_rotmat(&[0.3, -0.2, 0.9]);
        let mut transformed = Array2::<f64>::zeros((21, 3));
        for (i, row) in pred.rows().into_iter().enumerate() {
            let p = mat3_vec(&r, &[row[0], row[1], row[2]]);
            for a in 0..3 {
                transformed[[i, a]] = 1.7 * p[a] + [0.4, -0.1, 0.2][a];
            }
        }
        let again =
            position_error_mm(&procrustes_align(&transformed, &gt, true).unwrap(), &gt).unwrap();
        assert!((base - again).abs() < 1e-6);
    }

    #[test]
    fn procrustes_never_loses_to_centroid_translation() {
        // Residual must be at most the residual of the specific similarity
        // (identity rotation, unit scale, centroid translation).
        let mut rng = SeededRng::new(5);
        let gt = random_cloud(&mut rng, 21);
        let mut pred = random_cloud(&mut rng, 21);
        for v in pred.iter_mut() {
            *v *= 1.3;
        }
        let aligned = procrustes_align(&pred, &gt, true).unwrap();
        let pa = position_error_mm(&aligned, &gt).unwrap();

        let mean = |a: &Array2<f64>, c: usize| a.column(c).sum() / a.nrows() as f64;
        let mut translated = pred.clone();
        for c in 0..3 {
            let shift = mean(&gt, c) - mean(&pred, c);
            for v in translated.column_mut(c).iter_mut() {
                *v += shift;
            }
        }
        let centroid_resid = position_error_mm(&translated, &gt).unwrap();
        assert!(pa <= centroid_resid + 1e-9);
    }

    #[test]
    fn degenerate_cloud_rejected() {
        let flat = Array2::<f64>::zeros((21, 3));
        let mut rng = SeededRng::new(6);
        let gt = random_cloud(&mut rng, 21);
        assert!(procrustes_align(&flat, &gt, true).is_err());
    }

    #[test]
    fn position_error_examples() {
        let mut rng = SeededRng::new(7);
        let gt = random_cloud(&mut rng, 21);
        assert_eq!(position_error_mm(&gt, &gt).unwrap(), 0.0);

        let mut off = gt.clone();
        for mut r in off.rows_mut() {
            r[0] += 0.003;
        }
        assert!((position_error_mm(&off, &gt).unwrap() - 3.0).abs() < 1e-9);

        // Identical permutation of both clouds leaves the mean unchanged.
        let perm: Vec<usize> = (0..21).rev().collect();
        let permuted_pred = Array2::from_shape_fn((21, 3), |(i, j)| off[[perm[i], j]]);
        let permuted_gt = Array2::from_shape_fn((21, 3), |(i, j)| gt[[perm[i], j]]);
        let a = position_error_mm(&off, &gt).unwrap();
        let b = position_error_mm(&permuted_pred, &permuted_gt).unwrap();
        assert!((a - b).abs() < 1e-12);

        let bad = Array2::<f64>::zeros((20, 3));
        assert!(position_error_mm(&bad, &gt).is_err());
    }

    #[test]
    fn pck_auc_endpoints_and_oracle() {
        assert_eq!(pck_auc(&[0.0; 10], 50.0, 100).unwrap(), 1.0);
        assert_eq!(pck_auc(&[60.0; 10], 50.0, 100).unwrap(), 0.0);
        assert!(pck_auc(&[], 50.0, 100).is_err());
        assert!(pck_auc(&[1.0], 0.0, 100).is_err());

        // Independent trapezoid oracle.
        let mut rng = SeededRng::new(8);
        let errors: Vec<f64> = (0..37).map(|_| rng.uniform(0.0, 70.0)).collect();
        let (maxt, steps) = (50.0, 100);
        let got = pck_auc(&errors, maxt, steps).unwrap();

        let taus: Vec<f64> = (0..steps)
            .map(|k| maxt * k as f64 / (steps - 1) as f64)
            .collect();
        let pcks: Vec<f64> = taus
            .iter()
            .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
            .collect();
        let mut oracle = 0.0;
        for k in 0..steps - 1 {
            oracle += (pcks[k] + pcks[k + 1]) * 0.5 * (taus[k + 1] - taus[k]);
        }
        oracle /= maxt;
        assert!((got - oracle).abs() <= 1e-9);
    }

    #[test]
    fn pck_is_monotone_in_threshold() {
        let mut rng = SeededRng::new(9);
        let errors: Vec<f64> = (0..50).map(|_| rng.uniform(0.0, 70.0)).collect();
        let n = errors.len() as f64;
        let mut last = -1.0;
        for k in 0..=60 {
            let tau = k as f64;
            let pck = errors.iter().filter(|&&e| e <= tau).count() as f64 / n;
            assert!(pck >= last);
            last = pck;
        }
        // AUC is monotone under pointwise error domination.
        let dominated: Vec<f64> = errors.iter().map(|e| e + 5.0).collect();
        assert!(
            pck_auc(&dominated, 50.0, 100).unwrap() <= pck_auc(&errors, 50.0, 100).unwrap()
        );
    }
}
