//! A simplified, differentiable parametric hand.
//!
//! Maps pose `theta` (48 axis-angle values: 3 global + 15 joints x 3), shape
//! `beta` (10 coefficients), and translation `trans` (meters, first-camera
//! frame) to 21 joints and a skinned vertex mesh.
//!
//! # Kinematic convention
//!
//! Shape acts first: each bone vector gains a linear offset `basis[j] . beta`,
//! and shaped rest joints are re-accumulated down the tree. Posing then applies,
//! per joint, the local map `L_j(x) = R_j (x - r_j) + r_j` (a rotation about the
//! shaped rest joint position), composed root-to-leaf; the global orientation
//! `theta[0..3]` is the root's local map, so it pivots about the wrist. Finally
//! `trans` is added to everything. The wrist rest position is the origin and the
//! root row of the shape basis is zero, so joint 0 always lands exactly at
//! `trans`.
//!
//! `theta = 0` is this template's own rest pose; the zero pose of other MANO
//! conventions (flat vs. curled mean) is not replicated.
//!
//! Vertices are linear-blend-skinned: `v' = sum_j w_vj * A_j(v) + trans` where
//! `A_j` is joint j's composed rest-to-posed map and each weight row is convex.

pub mod template;

pub use template::{
    build_toy_template, HandTemplate, TemplateConfig, ARTICULATED_JOINTS, JOINT_COUNT, SHAPE_DIM,
    THETA_DIM,
};

use crate::camera::axis_angle_to_rotmat_t;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    /// 48 axis-angle values; the first three are the global orientation.
    pub theta: Vec<f64>,
    /// 10 shape coefficients, dimensionless.
    pub beta: Vec<f64>,
    /// Root translation in the first-camera frame, meters.
    pub trans: [f64; 3],
}

impl HandParams {
    pub fn zeros() -> Self {
        Self {
            theta: vec![0.0; THETA_DIM],
            beta: vec![0.0; SHAPE_DIM],
            trans: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != THETA_DIM {
            return Err(Error::shape("theta", "48", self.theta.len().to_string()));
        }
        if self.beta.len() != SHAPE_DIM {
            return Err(Error::shape("beta", "10", self.beta.len().to_string()));
        }
        if !self
            .theta
            .iter()
            .chain(&self.beta)
            .chain(&self.trans)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("hand parameters"));
        }
        Ok(())
    }
}

/// Graph-tensor form of [`HandParams`], as produced by the hand head.
#[derive(Clone)]
pub struct HandParamsT {
    pub theta: Tensor, // [48]
    pub beta: Tensor,  // [10]
    pub trans: Tensor, // [3]
}

impl HandParamsT {
    pub fn from_values(p: &HandParams) -> Self {
        Self {
            theta: Tensor::constant(Array1::from_vec(p.theta.clone()).into_dyn()),
            beta: Tensor::constant(Array1::from_vec(p.beta.clone()).into_dyn()),
            trans: Tensor::constant(Array1::from_vec(p.trans.to_vec()).into_dyn()),
        }
    }

    /// Differentiable leaves, for gradient checks and loss tests.
    pub fn variables(p: &HandParams) -> Self {
        Self {
            theta: Tensor::variable(Array1::from_vec(p.theta.clone()).into_dyn()),
            beta: Tensor::variable(Array1::from_vec(p.beta.clone()).into_dyn()),
            trans: Tensor::variable(Array1::from_vec(p.trans.to_vec()).into_dyn()),
        }
    }

    pub fn values(&self) -> HandParams {
        HandParams {
            theta: self.theta.value().iter().cloned().collect(),
            beta: self.beta.value().iter().cloned().collect(),
            trans: {
                let t = self.trans.value();
                [t[[0]], t[[1]], t[[2]]]
            },
        }
    }
}

/// Posed hand in the first-camera frame, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct HandGeometry {
    pub joints: Array2<f64>,   // [21, 3]
    pub vertices: Array2<f64>, // [V, 3]
}

/// Differentiable forward pass. Returns posed joints [21, 3] and, when
/// `with_vertices` is set, the skinned mesh [V, 3]. Training needs only the
/// joints; skinning is skipped there to keep graphs small.
pub fn forward_t(
    params: &HandParamsT,
    template: &HandTemplate,
    with_vertices: bool,
) -> (Tensor, Option<Tensor>) {
    assert_eq!(params.theta.shape(), &[THETA_DIM]);
    assert_eq!(params.beta.shape(), &[SHAPE_DIM]);
    assert_eq!(params.trans.shape(), &[3]);

    let nj = JOINT_COUNT;
    // Bone-vector shape offsets: [63, 10] @ [10, 1] -> [21, 3].
    let basis_flat = Tensor::constant(
        template
            .shape_basis
            .clone()
            .into_shape_with_order((nj * 3, SHAPE_DIM))
            .unwrap()
            .into_dyn(),
    );
    let deltas = basis_flat
        .matmul(&params.beta.reshape(&[SHAPE_DIM, 1]))
        .reshape(&[nj, 3]);

    // Shaped rest joints: rest position plus the accumulated bone offsets of
    // the ancestor chain.
    let rest = Tensor::constant(template.rest_joints.clone().into_dyn());
    let mut cum_delta: Vec<Tensor> = Vec::with_capacity(nj);
    cum_delta.push(deltas.slice_rows(0, 1));
    for j in 1..nj {
        let p = template.parents[j] as usize;
        cum_delta.push(cum_delta[p].add(&deltas.slice_rows(j, 1)));
    }
    let shaped: Vec<Tensor> = (0..nj)
        .map(|j| rest.slice_rows(j, 1).add(&cum_delta[j]))
        .collect();

    // Local rotations: global orientation at the root, one per articulated
    // joint, none at fingertips.
    let global_rot = axis_angle_to_rotmat_t(&params.theta.slice_rows(0, 3));
    let mut local_rot: Vec<Option<Tensor>> = vec![None; nj];
    local_rot[0] = Some(global_rot);
    for (i, &j) in ARTICULATED_JOINTS.iter().enumerate() {
        local_rot[j] = Some(axis_angle_to_rotmat_t(&params.theta.slice_rows(3 + 3 * i, 3)));
    }

    // Forward kinematics down the tree.
    let mut acc_rot: Vec<Tensor> = Vec::with_capacity(nj);
    let mut posed: Vec<Tensor> = Vec::with_capacity(nj); // [1, 3] each
    acc_rot.push(local_rot[0].clone().unwrap());
    posed.push(shaped[0].clone());
    for j in 1..nj {
        let p = template.parents[j] as usize;
        let offset = shaped[j].sub(&shaped[p]);
        posed.push(posed[p].add(&offset.matmul(&acc_rot[p].t_op())));
        let r = match &local_rot[j] {
            Some(local) => acc_rot[p].matmul(local),
            None => acc_rot[p].clone(),
        };
        acc_rot.push(r);
    }

    let joints = Tensor::concat_rows(&posed).add_row(&params.trans);

    let vertices = with_vertices.then(|| {
        let rest_v = Tensor::constant(template.rest_vertices.clone().into_dyn());
        let mut sum: Option<Tensor> = None;
        for j in 0..nj {
            let col = template.skin_weights.column(j);
            if col.iter().all(|&w| w == 0.0) {
                continue;
            }
            let w = Tensor::constant(col.to_owned().into_dyn());
            // A_j(v) = R_acc_j (v - r'_j) + t_j
            let part = rest_v
                .sub_row(&shaped[j].reshape(&[3]))
                .matmul(&acc_rot[j].t_op())
                .add_row(&posed[j].reshape(&[3]))
                .mul_col(&w);
            sum = Some(match sum {
                Some(s) => s.add(&part),
                None => part,
            });
        }
        sum.unwrap().add_row(&params.trans)
    });

    (joints, vertices)
}

/// Forward pass on plain values.
pub fn forward(params: &HandParams, template: &HandTemplate) -> Result<HandGeometry> {
    params.validate()?;
    let pt = HandParamsT::from_values(params);
    let (joints, vertices) = forward_t(&pt, template, true);
    Ok(HandGeometry {
        joints: joints.value().clone().into_dimensionality().unwrap(),
        vertices: vertices
            .unwrap()
            .value()
            .clone()
            .into_dimensionality()
            .unwrap(),
    })
}

/// Joints only, on plain values.
pub fn forward_joints(params: &HandParams, template: &HandTemplate) -> Result<Array2<f64>> {
    params.validate()?;
    let pt = HandParamsT::from_values(params);
    let (joints, _) = forward_t(&pt, template, false);
    Ok(joints.value().clone().into_dimensionality().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{axis_angle_to_rotmat, mat3_mul, mat3_vec, rotmat_to_axis_angle, Mat3};
    use crate::rng::SeededRng;
    use crate::tensor::fd;

    fn toy() -> HandTemplate {
        build_toy_template(&TemplateConfig::default()).unwrap()
    }

    fn random_params(rng: &mut SeededRng, pose_range: f64) -> HandParams {
        HandParams {
            theta: (0..THETA_DIM)
                .map(|_| rng.uniform(-pose_range, pose_range))
                .collect(),
            beta: (0..SHAPE_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            trans: [
                rng.uniform(-0.2, 0.2),
                rng.uniform(-0.2, 0.2),
                rng.uniform(-0.2, 0.2),
            ],
        }
    }

    // ------------------------------------------------------------------
    // Independent forward-kinematics oracle: explicit 4x4 homogeneous
    // matrix chains, sharing no code with the graph implementation.
    // ------------------------------------------------------------------
    type Mat4 = [[f64; 4]; 4];

    fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    fn mat4_apply(a: &Mat4, p: &[f64; 3]) -> [f64; 3] {
        let h = [p[0], p[1], p[2], 1.0];
        let mut out = [0.0; 3];
        for (i, row) in a.iter().take(3).enumerate() {
            out[i] = (0..4).map(|j| row[j] * h[j]).sum();
        }
        out
    }

    /// Rotation about a fixed point as a homogeneous matrix.
    fn rot_about(r: &Mat3, pivot: &[f64; 3]) -> Mat4 {
        let rp = mat3_vec(r, pivot);
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j];
            }
            m[i][3] = pivot[i] - rp[i];
        }
        m[3][3] = 1.0;
        m
    }

    fn oracle_joints(params: &HandParams, template: &HandTemplate) -> Vec<[f64; 3]> {
        // Shaped rest joints.
        let nj = JOINT_COUNT;
        let mut shaped = vec![[0.0f64; 3]; nj];
        for j in 0..nj {
            let mut delta = [0.0; 3];
            for a in 0..3 {
                for k in 0..SHAPE_DIM {
                    delta[a] += template.shape_basis[[j, a, k]] * params.beta[k];
                }
            }
            let base = if j == 0 {
                [0.0; 3]
            } else {
                shaped[template.parents[j] as usize]
            };
            let parent_rest: [f64; 3] = if j == 0 {
                [0.0; 3]
            } else {
                let p = template.parents[j] as usize;
                [
                    template.rest_joints[[p, 0]],
                    template.rest_joints[[p, 1]],
                    template.rest_joints[[p, 2]],
                ]
            };
            for a in 0..3 {
                let bone = template.rest_joints[[j, a]] - parent_rest[a];
                shaped[j][a] = base[a] + bone + delta[a];
            }
        }

        // Per-joint local rotations in template coordinates.
        let mut local = vec![crate::camera::MAT3_IDENTITY; nj];
        local[0] = axis_angle_to_rotmat(&[params.theta[0], params.theta[1], params.theta[2]]);
        for (i, &j) in ARTICULATED_JOINTS.iter().enumerate() {
            local[j] = axis_angle_to_rotmat(&[
                params.theta[3 + 3 * i],
                params.theta[4 + 3 * i],
                params.theta[5 + 3 * i],
            ]);
        }

        // Compose homogeneous maps root-to-leaf and read off joint images.
        let mut chain: Vec<Mat4> = Vec::with_capacity(nj);
        chain.push(rot_about(&local[0], &shaped[0]));
        for j in 1..nj {
            let p = template.parents[j] as usize;
            let l = rot_about(&local[j], &shaped[j]);
            chain.push(mat4_mul(&chain[p], &l));
        }
        (0..nj)
            .map(|j| {
                let pos = mat4_apply(&chain[j], &shaped[j]);
                [
                    pos[0] + params.trans[0],
                    pos[1] + params.trans[1],
                    pos[2] + params.trans[2],
                ]
            })
            .collect()
    }

    #[test]
    fn identity_pose_reproduces_rest_geometry() {
        let t = toy();
        let g = forward(&HandParams::zeros(), &t).unwrap();
        let jd = (&g.joints - &t.rest_joints)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        let vd = (&g.vertices - &t.rest_vertices)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(jd < 1e-12 && vd < 1e-12, "jd={jd} vd={vd}");
    }

    #[test]
    fn translation_shifts_everything_exactly() {
        let t = toy();
        let mut rng = SeededRng::new(71);
        let p = random_params(&mut rng, 0.8);
        let mut p2 = p.clone();
        p2.trans[0] += 0.1;
        let a = forward(&p, &t).unwrap();
        let b = forward(&p2, &t).unwrap();
        for (ra, rb) in a.joints.rows().into_iter().zip(b.joints.rows()) {
            assert!((rb[0] - ra[0] - 0.1).abs() < 1e-12);
            assert!((rb[1] - ra[1]).abs() < 1e-12);
            assert!((rb[2] - ra[2]).abs() < 1e-12);
        }
        for (ra, rb) in a.vertices.rows().into_iter().zip(b.vertices.rows()) {
            assert!((rb[0] - ra[0] - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn root_joint_equals_translation() {
        let t = toy();
        let mut rng = SeededRng::new(73);
        for _ in 0..5 {
            let p = random_params(&mut rng, 1.0);
            let g = forward(&p, &t).unwrap();
            for a in 0..3 {
                assert!((g.joints[[0, a]] - p.trans[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joints_match_independent_fk_oracle() {
        let t = toy();
        let mut rng = SeededRng::new(79);
        for _ in 0..20 {
            let p = random_params(&mut rng, 1.2);
            let g = forward(&p, &t).unwrap();
            let oracle = oracle_joints(&p, &t);
            for (j, o) in oracle.iter().enumerate() {
                for a in 0..3 {
                    assert!(
                        (g.joints[[j, a]] - o[a]).abs() < 1e-6,
                        "joint {j} axis {a}: {} vs {}",
                        g.joints[[j, a]],
                        o[a]
                    );
                }
            }
        }
    }

    #[test]
    fn global_rotation_equivariance() {
        // Replacing the global rotation R0 by R*R0 (and trans by R*trans)
        // rotates all root-relative joints and vertices by exactly R.
        let t = toy();
        let mut rng = SeededRng::new(83);
        let p = random_params(&mut rng, 1.0);
        let r_extra = axis_angle_to_rotmat(&[0.4, -0.7, 0.2]);
        let r0 = axis_angle_to_rotmat(&[p.theta[0], p.theta[1], p.theta[2]]);
        let combined = rotmat_to_axis_angle(&mat3_mul(&r_extra, &r0));

        let mut p2 = p.clone();
        p2.theta[..3].copy_from_slice(&combined);
        p2.trans = mat3_vec(&r_extra, &p.trans);

        let a = forward(&p, &t).unwrap();
        let b = forward(&p2, &t).unwrap();
        for (pa, pb) in a
            .joints
            .rows()
            .into_iter()
            .zip(b.joints.rows())
            .chain(a.vertices.rows().into_iter().zip(b.vertices.rows()))
        {
            let rel_a = [
                pa[0] - a.joints[[0, 0]],
                pa[1] - a.joints[[0, 1]],
                pa[2] - a.joints[[0, 2]],
            ];
            let rel_b = [
                pb[0] - b.joints[[0, 0]],
                pb[1] - b.joints[[0, 1]],
                pb[2] - b.joints[[0, 2]],
            ];
            let rotated = mat3_vec(&r_extra, &rel_a);
            for i in 0..3 {
                assert!((rotated[i] - rel_b[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_beta_preserves_bone_lengths() {
        let t = toy();
        let mut rng = SeededRng::new(89);
        let mut p = random_params(&mut rng, 1.0);
        p.beta = vec![0.0; SHAPE_DIM];
        let g = forward(&p, &t).unwrap();
        let rest_len = t.rest_bone_lengths();
        for j in 1..JOINT_COUNT {
            let parent = t.parents[j] as usize;
            let d = [
                g.joints[[j, 0]] - g.joints[[parent, 0]],
                g.joints[[j, 1]] - g.joints[[parent, 1]],
                g.joints[[j, 2]] - g.joints[[parent, 2]],
            ];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((len - rest_len[j - 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn nonzero_beta_changes_bone_lengths() {
        let t = toy();
        let mut p = HandParams::zeros();
        p.beta[0] = 1.0;
        let g = forward(&p, &t).unwrap();
        let rest_len = t.rest_bone_lengths();
        let d = [
            g.joints[[5, 0]] - g.joints[[0, 0]],
            g.joints[[5, 1]] - g.joints[[0, 1]],
            g.joints[[5, 2]] - g.joints[[0, 2]],
        ];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        assert!((len / rest_len[4] - 1.08).abs() < 1e-9);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let t = toy();
        let mut p = HandParams::zeros();
        p.theta[5] = f64::NAN;
        assert!(forward(&p, &t).is_err());
        let mut q = HandParams::zeros();
        q.theta.pop();
        assert!(forward(&q, &t).is_err());
    }

    #[test]
    fn skinned_vertices_stay_in_convex_hull_of_bone_images() {
        // With convex weight rows, each vertex is a convex combination of its
        // per-joint rigid images; verify against explicitly computed images.
        let t = toy();
        let mut rng = SeededRng::new(97);
        let p = random_params(&mut rng, 1.0);
        let pt = HandParamsT::from_values(&p);
        let (joints_t, verts_t) = forward_t(&pt, &t, true);
        let _ = joints_t;
        let verts = verts_t.unwrap();

        // Recompute the per-joint images with the oracle chain.
        let oracle = {
            let mut shaped = vec![[0.0f64; 3]; JOINT_COUNT];
            for j in 0..JOINT_COUNT {
                let mut delta = [0.0; 3];
                for a in 0..3 {
                    for k in 0..SHAPE_DIM {
                        delta[a] += t.shape_basis[[j, a, k]] * p.beta[k];
                    }
                }
                if j == 0 {
                    shaped[0] = delta;
                } else {
                    let par = t.parents[j] as usize;
                    for a in 0..3 {
                        let bone = t.rest_joints[[j, a]] - t.rest_joints[[par, a]];
                        shaped[j][a] = shaped[par][a] + bone + delta[a];
                    }
                }
            }
            let mut local = vec![crate::camera::MAT3_IDENTITY; JOINT_COUNT];
            local[0] = axis_angle_to_rotmat(&[p.theta[0], p.theta[1], p.theta[2]]);
            for (i, &j) in ARTICULATED_JOINTS.iter().enumerate() {
                local[j] = axis_angle_to_rotmat(&[
                    p.theta[3 + 3 * i],
                    p.theta[4 + 3 * i],
                    p.theta[5 + 3 * i],
                ]);
            }
            let mut chain: Vec<Mat4> = Vec::with_capacity(JOINT_COUNT);
            chain.push(rot_about(&local[0], &shaped[0]));
            for j in 1..JOINT_COUNT {
                let par = t.parents[j] as usize;
                chain.push(mat4_mul(&chain[par], &rot_about(&local[j], &shaped[j])));
            }
            chain
        };

        for (vi, row) in t.skin_weights.rows().into_iter().enumerate() {
            let v = [
                t.rest_vertices[[vi, 0]],
                t.rest_vertices[[vi, 1]],
                t.rest_vertices[[vi, 2]],
            ];
            let mut blend = [p.trans[0], p.trans[1], p.trans[2]];
            for (j, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let img = mat4_apply(&oracle[j], &v);
                for a in 0..3 {
                    blend[a] += w * img[a];
                }
            }
            for a in 0..3 {
                assert!((verts.value()[[vi, a]] - blend[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = toy();
        let mut rng = SeededRng::new(101);
        for _ in 0..10 {
            let p = random_params(&mut rng, 0.9);
            let vars = HandParamsT::variables(&p);
            let (joints, _) = forward_t(&vars, &t, false);
            let out = joints.sum_all();
            out.backward();

            let eval = |theta: &[f64], beta: &[f64], trans: &[f64]| {
                let params = HandParams {
                    theta: theta.to_vec(),
                    beta: beta.to_vec(),
                    trans: [trans[0], trans[1], trans[2]],
                };
                let pt = HandParamsT::from_values(&params);
                forward_t(&pt, &t, false).0.sum_all().scalar()
            };

            for (leaf, f) in [
                (
                    &vars.theta,
                    Box::new(|x: &[f64]| eval(x, &p.beta, &p.trans)) as Box<dyn Fn(&[f64]) -> f64>,
                ),
                (&vars.beta, Box::new(|x: &[f64]| eval(&p.theta, x, &p.trans))),
                (&vars.trans, Box::new(|x: &[f64]| eval(&p.theta, &p.beta, x))),
            ] {
                let analytic: Vec<f64> = leaf.grad().unwrap().iter().cloned().collect();
                let x0: Vec<f64> = leaf.value().iter().cloned().collect();
                let numeric = fd::central_diff(|x| f(x), &x0, 1e-5);
                let err = fd::max_rel_err(&analytic, &numeric);
                assert!(err <= 1e-4, "hand forward gradient rel err {err}");
            }
        }
    }
}
