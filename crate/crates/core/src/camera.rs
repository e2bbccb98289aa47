//! Camera encodings, rotation conversions, perspective projection, and the
//! SO(3) geodesic distance.
//!
//! A camera is encoded as 9 numbers: translation `T` (world-to-camera, meters),
//! a unit quaternion `q = (w, x, y, z)`, and the horizontal/vertical field of
//! view in radians. Poses are expressed relative to the first view, whose
//! encoding is always the identity pose.
//!
//! Every operation exists in two forms: a plain `f64` function (used by the
//! data generator, metrics, and tests) and a `*_t` graph version built from
//! [`Tensor`] ops (used inside the loss stack, where gradients must flow
//! through rotation, projection, and field of view). The two are cross-checked
//! against each other in the tests.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Quaternion components are ordered (w, x, y, z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEncoding {
    pub t: Vec3,
    pub q: [f64; 4],
    pub fov: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

impl CameraEncoding {
    /// The reference-view pose: zero translation, identity rotation. The field
    /// of view is still a real camera property and must be supplied.
    pub fn identity(fov: [f64; 2]) -> Self {
        Self {
            t: [0.0; 3],
            q: IDENTITY_QUAT,
            fov,
        }
    }

    pub fn new(t: Vec3, q: [f64; 4], fov: [f64; 2]) -> Result<Self> {
        let enc = Self { t, q, fov }.canonical()?;
        enc.validate()?;
        Ok(enc)
    }

    /// Normalize the quaternion and fix the sign convention (w >= 0).
    pub fn canonical(mut self) -> Result<Self> {
        let n = quat_norm(&self.q);
        if n < 1e-12 {
            return Err(Error::invalid("zero quaternion in camera encoding"));
        }
        for c in &mut self.q {
            *c /= n;
        }
        if self.q[0] < 0.0 {
            for c in &mut self.q {
                *c = -*c;
            }
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.t.iter().chain(&self.q).chain(&self.fov).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera encoding"));
        }
        if (quat_norm(&self.q) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera quaternion is not unit length"));
        }
        if !self.fov.iter().all(|&f| f > 0.0 && f < std::f64::consts::PI) {
            return Err(Error::invalid("field of view outside (0, pi)"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Result<Mat3> {
        quat_to_rotmat(&self.q)
    }

    pub fn intrinsics(&self, width: usize, height: usize) -> Result<Intrinsics> {
        fov_to_intrinsics(&self.fov, width, height)
    }

    /// The flat 9-vector [T, q, f].
    pub fn to_vec9(&self) -> [f64; 9] {
        let mut v = [0.0; 9];
        v[..3].copy_from_slice(&self.t);
        v[3..7].copy_from_slice(&self.q);
        v[7..].copy_from_slice(&self.fov);
        v
    }

    pub fn from_vec9(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::shape("camera encoding", "9", v.len().to_string()));
        }
        Self::new(
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5], v[6]],
            [v[7], v[8]],
        )
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// small fixed-size linear algebra
// ---------------------------------------------------------------------------

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn vec3_sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec3_add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec3_norm(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn vec3_cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Deviation of `r` from orthonormality, max |(R R^T - I)_ij|.
fn rotation_defect(r: &Mat3) -> f64 {
    let rrt = mat3_mul(r, &mat3_transpose(r));
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rrt[i][j] - target).abs());
        }
    }
    worst
}

fn check_rotation(r: &Mat3, context: &'static str) -> Result<()> {
    if rotation_defect(r) > 1e-4 || mat3_det(r) < 0.0 {
        return Err(Error::invalid(format!(
            "{context}: input is not a rotation matrix"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rotation representations
// ---------------------------------------------------------------------------

/// Rotation matrix of a (not necessarily normalized) quaternion.
pub fn quat_to_rotmat(q: &[f64; 4]) -> Result<Mat3> {
    let n = quat_norm(q);
    if n < 1e-12 {
        return Err(Error::invalid("zero quaternion"));
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Quaternion (w >= 0) of a rotation matrix, Shepperd's branching.
pub fn rotmat_to_quat(r: &Mat3) -> [f64; 4] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let mut q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = quat_norm(&q);
    for c in &mut q {
        *c /= n;
    }
    if q[0] < 0.0 {
        for c in &mut q {
            *c = -*c;
        }
    }
    q
}

/// Rodrigues formula; series expansion below |w| = 1e-8 keeps it well defined
/// (and differentiable) at zero rotation.
pub fn axis_angle_to_rotmat(w: &Vec3) -> Mat3 {
    let theta_sq = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if theta_sq < 1e-16 {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let k = [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ];
    let kk = mat3_mul(&k, &k);
    let mut r = MAT3_IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * kk[i][j];
        }
    }
    r
}

/// Log map via the quaternion, robust near 0 and pi.
pub fn rotmat_to_axis_angle(r: &Mat3) -> Vec3 {
    let q = rotmat_to_quat(r);
    let (w, v) = (q[0], [q[1], q[2], q[3]]);
    let vn = vec3_norm(&v);
    if vn < 1e-12 {
        return [0.0; 3];
    }
    let angle = 2.0 * vn.atan2(w);
    [v[0] / vn * angle, v[1] / vn * angle, v[2] / vn * angle]
}

/// Geodesic distance on SO(3): the rotation angle of `r1^T r2`, in [0, pi].
///
/// Equals arccos(clamp((trace(r1^T r2) - 1) / 2, -1, 1)), but evaluated in
/// atan2 form: the arccos form amplifies rounding near 0 and pi (acos of
/// 1 - 1e-16 is already ~1e-8), while atan2 of the skew/trace parts stays
/// accurate there, which the zero-iff-coincident guarantee needs.
pub fn geodesic_distance(r1: &Mat3, r2: &Mat3) -> Result<f64> {
    check_rotation(r1, "geodesic_distance")?;
    check_rotation(r2, "geodesic_distance")?;
    let m = mat3_mul(&mat3_transpose(r1), r2);
    let cos_part = (m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0;
    let skew = [
        m[2][1] - m[1][2],
        m[0][2] - m[2][0],
        m[1][0] - m[0][1],
    ];
    let sin_part = vec3_norm(&skew) / 2.0;
    Ok(sin_part.atan2(cos_part))
}

/// Uniform random rotation as a unit quaternion (Shoemake's method).
pub fn random_unit_quat(rng: &mut SeededRng) -> [f64; 4] {
    use std::f64::consts::TAU;
    let r1 = rng.uniform(0.0, 1.0);
    let r2 = rng.uniform(0.0, 1.0);
    let r3 = rng.uniform(0.0, 1.0);
    let a = (1.0 - r1).sqrt();
    let b = r1.sqrt();
    let mut q = [
        a * (TAU * r2).cos(),
        a * (TAU * r2).sin(),
        b * (TAU * r3).cos(),
        b * (TAU * r3).sin(),
    ];
    if q[0] < 0.0 {
        for c in &mut q {
            *c = -*c;
        }
    }
    q
}

// ---------------------------------------------------------------------------
// intrinsics and projection
// ---------------------------------------------------------------------------

pub fn fov_to_intrinsics(fov: &[f64; 2], width: usize, height: usize) -> Result<Intrinsics> {
    if !fov.iter().all(|&f| f > 0.0 && f < std::f64::consts::PI) {
        return Err(Error::invalid(format!(
            "field of view {fov:?} outside (0, pi)"
        )));
    }
    Ok(Intrinsics {
        fx: (width as f64 / 2.0) / (fov[0] / 2.0).tan(),
        fy: (height as f64 / 2.0) / (fov[1] / 2.0).tan(),
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    })
}

pub fn intrinsics_to_fov(k: &Intrinsics) -> [f64; 2] {
    [
        2.0 * ((k.width as f64 / 2.0) / k.fx).atan(),
        2.0 * ((k.height as f64 / 2.0) / k.fy).atan(),
    ]
}

/// Perspective projection of `points` (N x 3, meters, reference frame) through
/// `pose` with intrinsics `k`.
///
/// Returns pixel coordinates (N x 2) and camera-frame depths (N). Points with
/// |depth| < 1e-8 get non-finite pixels — they are flagged, not an error,
/// because the negative-depth penalty needs to see these depths.
pub fn project(
    points: &Array2<f64>,
    k: &Intrinsics,
    pose: &CameraEncoding,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if points.ncols() != 3 {
        return Err(Error::shape(
            "project",
            "N x 3",
            format!("{:?}", points.shape()),
        ));
    }
    let r = pose.rotation()?;
    let n = points.nrows();
    let mut pixels = Array2::<f64>::zeros((n, 2));
    let mut depths = Array1::<f64>::zeros(n);
    for (i, p) in points.rows().into_iter().enumerate() {
        let pw = [p[0], p[1], p[2]];
        let pc = vec3_add(&mat3_vec(&r, &pw), &pose.t);
        depths[i] = pc[2];
        if pc[2].abs() < 1e-8 {
            pixels[[i, 0]] = f64::NAN;
            pixels[[i, 1]] = f64::NAN;
        } else {
            pixels[[i, 0]] = k.fx * pc[0] / pc[2] + k.cx;
            pixels[[i, 1]] = k.fy * pc[1] / pc[2] + k.cy;
        }
    }
    Ok((pixels, depths))
}

/// Re-express world-frame poses relative to the first one.
///
/// `out[s]` maps first-camera coordinates to view-s coordinates; `out[0]` is
/// the identity pose.
pub fn relative_to_first(poses: &[CameraEncoding]) -> Result<Vec<CameraEncoding>> {
    if poses.is_empty() {
        return Err(Error::invalid("relative_to_first: empty pose list"));
    }
    let r1 = poses[0].rotation()?;
    let r1t = mat3_transpose(&r1);
    let t1 = poses[0].t;
    let mut out = Vec::with_capacity(poses.len());
    out.push(CameraEncoding::identity(poses[0].fov));
    for pose in &poses[1..] {
        let rs = pose.rotation()?;
        // p_s = R_s p_w + T_s and p_w = R_1^T (p_1 - T_1)
        // => p_s = (R_s R_1^T) p_1 + (T_s - R_s R_1^T T_1)
        let r_rel = mat3_mul(&rs, &r1t);
        let t_rel = vec3_sub(&pose.t, &mat3_vec(&r_rel, &t1));
        out.push(CameraEncoding::new(t_rel, rotmat_to_quat(&r_rel), pose.fov)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// graph versions
// ---------------------------------------------------------------------------

/// Differentiable rotation matrix from a quaternion tensor of shape [4].
/// The quaternion is normalized in-graph, so the result (and every loss built
/// on it) is invariant to the scale and sign of the raw prediction.
pub fn quat_to_rotmat_t(q_raw: &Tensor) -> Tensor {
    assert_eq!(q_raw.shape(), &[4]);
    let norm = q_raw.square().sum_all().sqrt_op();
    let q = q_raw.scale_div(&norm);
    let comp = |i: usize| q.slice_rows(i, 1).reshape(&[]);
    let (w, x, y, z) = (comp(0), comp(1), comp(2), comp(3));

    let two = 2.0;
    let entry = |t: Tensor| t.reshape(&[1]);
    let r00 = entry(y.square().add(&z.square()).mul_scalar(-two).add_scalar(1.0));
    let r01 = entry(x.mul(&y).sub(&w.mul(&z)).mul_scalar(two));
    let r02 = entry(x.mul(&z).add(&w.mul(&y)).mul_scalar(two));
    let r10 = entry(x.mul(&y).add(&w.mul(&z)).mul_scalar(two));
    let r11 = entry(x.square().add(&z.square()).mul_scalar(-two).add_scalar(1.0));
    let r12 = entry(y.mul(&z).sub(&w.mul(&x)).mul_scalar(two));
    let r20 = entry(x.mul(&z).sub(&w.mul(&y)).mul_scalar(two));
    let r21 = entry(y.mul(&z).add(&w.mul(&x)).mul_scalar(two));
    let r22 = entry(x.square().add(&y.square()).mul_scalar(-two).add_scalar(1.0));

    Tensor::concat_rows(&[r00, r01, r02, r10, r11, r12, r20, r21, r22]).reshape(&[3, 3])
}

/// Differentiable Rodrigues formula: axis-angle [3] -> rotation [3, 3].
/// Mirrors [`axis_angle_to_rotmat`] including the small-angle series, chosen
/// per evaluation from the input magnitude.
pub fn axis_angle_to_rotmat_t(w: &Tensor) -> Tensor {
    assert_eq!(w.shape(), &[3]);
    let theta_sq = w.square().sum_all();
    let (a, b) = if theta_sq.scalar() < 1e-16 {
        // a = 1 - s/6, b = 1/2 - s/24 in terms of s = |w|^2
        (
            theta_sq.mul_scalar(-1.0 / 6.0).add_scalar(1.0),
            theta_sq.mul_scalar(-1.0 / 24.0).add_scalar(0.5),
        )
    } else {
        let theta = theta_sq.sqrt_op();
        (
            theta.sin_op().div(&theta),
            theta.cos_op().rsub_scalar(1.0).div(&theta_sq),
        )
    };
    let k = w.hat();
    let kk = k.matmul(&k);
    let eye = Tensor::constant(Array2::<f64>::eye(3).into_dyn());
    eye.add(&k.scale(&a)).add(&kk.scale(&b))
}

/// Differentiable geodesic angle between two rotation tensors.
pub fn geodesic_t(r1: &Tensor, r2: &Tensor) -> Tensor {
    let tr = r1.mul(r2).sum_all();
    tr.add_scalar(-1.0).mul_scalar(0.5).acos_clamped()
}

/// Differentiable focal lengths [fx, fy] from a field-of-view tensor [2].
pub fn fov_to_focal_t(fov: &Tensor, width: usize, height: usize) -> Tensor {
    let half = fov.mul_scalar(0.5);
    let cot = half.cos_op().div(&half.sin_op());
    let halves = Tensor::constant(
        ndarray::arr1(&[width as f64 / 2.0, height as f64 / 2.0]).into_dyn(),
    );
    cot.mul(&halves)
}

/// Differentiable projection. `rot` is [3,3], `t` is [3], `focal` is [2].
/// Returns (pixels [N,2], depths [N,1]). Depths of exactly zero produce
/// non-finite pixels in the forward value; callers mask those by value.
pub fn project_t(
    points: &Tensor,
    rot: &Tensor,
    t: &Tensor,
    focal: &Tensor,
    cx: f64,
    cy: f64,
) -> (Tensor, Tensor) {
    let n = points.shape()[0];
    let cam = points.matmul(&rot.t_op()).add_row(t);
    let z = cam.slice_cols(2, 1);
    let xy = cam.slice_cols(0, 2);
    let ones = Tensor::constant(Array1::<f64>::ones(n).into_dyn());
    let inv_z = ones.div(&z.reshape(&[n]));
    let principal = Tensor::constant(ndarray::arr1(&[cx, cy]).into_dyn());
    let pixels = xy.mul_col(&inv_z).mul_row(focal).add_row(&principal);
    (pixels, z)
}
