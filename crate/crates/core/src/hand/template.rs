//! Hand templates: the skeleton, shape basis, and skinned tube mesh that the
//! kinematic forward pass poses.
//!
//! The built-in toy template is fully procedural: 21 joints (wrist + 5 fingers
//! x MCP/PIP/DIP/TIP) laid out flat in the x-y plane with fingers along +y and
//! the thumb splayed toward +x, and a 194-vertex mesh of ring vertices around
//! each bone plus joint centers and a palm patch. Templates with the same
//! layout but richer meshes (e.g. 778 vertices) can be loaded from an asset
//! file; the parameter interface (48 pose / 10 shape / 3 translation) is
//! independent of the mesh resolution.

use crate::camera::{vec3_cross, vec3_norm, Vec3};
use crate::error::{Error, Result};
use crate::io::ArrayFile;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const JOINT_COUNT: usize = 21;
pub const SHAPE_DIM: usize = 10;
pub const THETA_DIM: usize = 48;

/// Indices of the 15 articulated joints (MCP/PIP/DIP per finger), in the order
/// their axis-angle triples appear in theta[3..48].
pub const ARTICULATED_JOINTS: [usize; 15] = [1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19];

/// Parent indices for the 21-joint skeleton; -1 marks the wrist root.
/// Finger f occupies joints 1+4f (MCP), 2+4f (PIP), 3+4f (DIP), 4+4f (TIP).
pub const PARENTS: [i64; JOINT_COUNT] = [
    -1, // wrist
    0, 1, 2, 3, // thumb
    0, 5, 6, 7, // index
    0, 9, 10, 11, // middle
    0, 13, 14, 15, // ring
    0, 17, 18, 19, // pinky
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateConfig {
    /// Scales the knuckle distances from the wrist.
    pub palm_scale: f64,
    /// Scales all finger segment lengths.
    pub finger_scale: f64,
    /// Extra scale on the thumb chain.
    pub thumb_scale: f64,
    /// Radius of the tube mesh around finger bones, meters.
    pub tube_radius: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            palm_scale: 1.0,
            finger_scale: 1.0,
            thumb_scale: 1.0,
            tube_radius: 0.009,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandTemplate {
    /// Rest joint positions, meters; the wrist sits at the origin.
    pub rest_joints: Array2<f64>, // [21, 3]
    /// parents[0] = -1; every other joint's parent has a smaller index.
    pub parents: Vec<i64>,
    /// Per-joint bone-vector offsets, linear in the 10 shape coefficients.
    pub shape_basis: Array3<f64>, // [21, 3, 10]
    pub rest_vertices: Array2<f64>, // [V, 3]
    /// Convex skinning weights; each row sums to 1.
    pub skin_weights: Array2<f64>, // [V, 21]
}

impl HandTemplate {
    pub fn joint_count(&self) -> usize {
        JOINT_COUNT
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.nrows()
    }

    /// Unit direction of the bone leaving `joint` toward its first child, in
    /// rest pose. Used by the pose sampler to build anatomical flexion axes.
    pub fn bone_direction(&self, joint: usize) -> Option<Vec3> {
        let child = (0..JOINT_COUNT).find(|&c| self.parents[c] == joint as i64)?;
        let d = [
            self.rest_joints[[child, 0]] - self.rest_joints[[joint, 0]],
            self.rest_joints[[child, 1]] - self.rest_joints[[joint, 1]],
            self.rest_joints[[child, 2]] - self.rest_joints[[joint, 2]],
        ];
        let n = vec3_norm(&d);
        Some([d[0] / n, d[1] / n, d[2] / n])
    }

    /// Flexion axis for `joint`: perpendicular to its bone in the palm plane,
    /// oriented so positive angles curl toward the palm normal (+z).
    pub fn flexion_axis(&self, joint: usize) -> Option<Vec3> {
        let d = self.bone_direction(joint)?;
        let a = vec3_cross(&d, &[0.0, 0.0, 1.0]);
        let n = vec3_norm(&a);
        if n < 1e-9 {
            return Some([1.0, 0.0, 0.0]);
        }
        Some([a[0] / n, a[1] / n, a[2] / n])
    }

    pub fn rest_bone_lengths(&self) -> Vec<f64> {
        (1..JOINT_COUNT)
            .map(|j| {
                let p = self.parents[j] as usize;
                let d = [
                    self.rest_joints[[j, 0]] - self.rest_joints[[p, 0]],
                    self.rest_joints[[j, 1]] - self.rest_joints[[p, 1]],
                    self.rest_joints[[j, 2]] - self.rest_joints[[p, 2]],
                ];
                vec3_norm(&d)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rest_joints.shape() != [JOINT_COUNT, 3] {
            return Err(Error::InvalidTemplate(format!(
                "rest_joints shape {:?}",
                self.rest_joints.shape()
            )));
        }
        if self.parents.len() != JOINT_COUNT || self.parents[0] != -1 {
            return Err(Error::InvalidTemplate("parents must be 21 entries with parents[0] = -1".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::InvalidTemplate(format!(
                    "parents[{j}] = {p} does not precede its child; not a topologically ordered tree"
                )));
            }
        }
        if self.shape_basis.shape() != [JOINT_COUNT, 3, SHAPE_DIM] {
            return Err(Error::InvalidTemplate(format!(
                "shape_basis shape {:?}",
                self.shape_basis.shape()
            )));
        }
        let v = self.rest_vertices.nrows();
        if self.rest_vertices.ncols() != 3 || self.skin_weights.shape() != [v, JOINT_COUNT] {
            return Err(Error::InvalidTemplate(format!(
                "mesh arrays disagree: vertices {:?}, weights {:?}",
                self.rest_vertices.shape(),
                self.skin_weights.shape()
            )));
        }
        for (i, row) in self.skin_weights.rows().into_iter().enumerate() {
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidTemplate(format!("negative skin weight in row {i}")));
            }
            if (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidTemplate(format!(
                    "skin weight row {i} sums to {}",
                    row.sum()
                )));
            }
        }
        if self.rest_bone_lengths().iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidTemplate("zero-length rest bone".into()));
        }
        if !self.rest_joints.iter().all(|v| v.is_finite())
            || !self.rest_vertices.iter().all(|v| v.is_finite())
            || !self.shape_basis.iter().all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("hand template"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = ArrayFile::new();
        file.insert_f64("rest_joints", self.rest_joints.clone().into_dyn());
        file.insert_i64(
            "parents",
            ndarray::Array1::from_vec(self.parents.clone()).into_dyn(),
        );
        file.insert_f64("shape_basis", self.shape_basis.clone().into_dyn());
        file.insert_f64("rest_vertices", self.rest_vertices.clone().into_dyn());
        file.insert_f64("skin_weights", self.skin_weights.clone().into_dyn());
        file.meta = serde_json::json!({"kind": "hand_template", "version": 1});
        file.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = ArrayFile::load(path)?;
        let v = file.f64_array("rest_vertices")?.shape()[0];
        let template = HandTemplate {
            rest_joints: file
                .f64_checked("rest_joints", &[JOINT_COUNT, 3])?
                .clone()
                .into_dimensionality()
                .unwrap(),
            parents: file.i64_array("parents")?.iter().cloned().collect(),
            shape_basis: file
                .f64_checked("shape_basis", &[JOINT_COUNT, 3, SHAPE_DIM])?
                .clone()
                .into_dimensionality()
                .unwrap(),
            rest_vertices: file
                .f64_checked("rest_vertices", &[v, 3])?
                .clone()
                .into_dimensionality()
                .unwrap(),
            skin_weights: file
                .f64_checked("skin_weights", &[v, JOINT_COUNT])?
                .clone()
                .into_dimensionality()
                .unwrap(),
        };
        template.validate()?;
        Ok(template)
    }
}

/// Per-finger rest layout: angle from +y in the palm plane, knuckle distance,
/// and the three segment lengths (meters).
const FINGERS: [(f64, f64, [f64; 3]); 5] = [
    (1.13, 0.048, [0.048, 0.034, 0.028]), // thumb
    (0.35, 0.092, [0.046, 0.028, 0.022]), // index
    (0.03, 0.094, [0.049, 0.030, 0.023]), // middle
    (-0.21, 0.088, [0.045, 0.028, 0.022]), // ring
    (-0.49, 0.080, [0.037, 0.022, 0.019]), // pinky
];

/// Build the procedural 21-joint, 194-vertex toy template. Deterministic for
/// a fixed config.
pub fn build_toy_template(config: &TemplateConfig) -> Result<HandTemplate> {
    if config.palm_scale <= 0.0
        || config.finger_scale <= 0.0
        || config.thumb_scale <= 0.0
        || config.tube_radius <= 0.0
    {
        return Err(Error::InvalidTemplate("template scales must be positive".into()));
    }

    let mut joints = Array2::<f64>::zeros((JOINT_COUNT, 3));
    for (f, (angle, knuckle, segments)) in FINGERS.iter().enumerate() {
        let scale = if f == 0 { config.thumb_scale } else { 1.0 };
        let dir = [angle.sin(), angle.cos(), 0.0];
        let base = 4 * f; // finger f occupies joints base+1 ..= base+4
        let mut pos = [
            dir[0] * knuckle * config.palm_scale * scale,
            dir[1] * knuckle * config.palm_scale * scale,
            0.0,
        ];
        joints[[base + 1, 0]] = pos[0];
        joints[[base + 1, 1]] = pos[1];
        for (k, seg) in segments.iter().enumerate() {
            let len = seg * config.finger_scale * scale;
            pos = [pos[0] + dir[0] * len, pos[1] + dir[1] * len, pos[2]];
            joints[[base + 2 + k, 0]] = pos[0];
            joints[[base + 2 + k, 1]] = pos[1];
            joints[[base + 2 + k, 2]] = pos[2];
        }
    }

    let template_no_mesh = HandTemplate {
        rest_joints: joints.clone(),
        parents: PARENTS.to_vec(),
        shape_basis: Array3::zeros((JOINT_COUNT, 3, SHAPE_DIM)),
        rest_vertices: Array2::zeros((1, 3)),
        skin_weights: Array2::zeros((1, JOINT_COUNT)),
    };

    // Shape basis: each coefficient stretches a family of bones along their
    // rest direction, proportional to the rest length.
    let mut basis = Array3::<f64>::zeros((JOINT_COUNT, 3, SHAPE_DIM));
    for j in 1..JOINT_COUNT {
        let p = PARENTS[j] as usize;
        let bone = [
            joints[[j, 0]] - joints[[p, 0]],
            joints[[j, 1]] - joints[[p, 1]],
            joints[[j, 2]] - joints[[p, 2]],
        ];
        let finger = (j - 1) / 4;
        let within = (j - 1) % 4; // 0 = knuckle bone, 1..3 = segments
        let mut coeffs = [0.0f64; SHAPE_DIM];
        coeffs[0] = 0.08; // overall size
        if finger > 0 {
            coeffs[1] = 0.05; // finger length (non-thumb)
        } else {
            coeffs[2] = 0.05; // thumb length
        }
        coeffs[3 + finger] = 0.06; // per-finger length
        if within >= 2 {
            coeffs[8] = 0.04; // distal emphasis
        }
        if within == 0 {
            coeffs[9] = 0.04; // palm breadth
        }
        for (k, c) in coeffs.iter().enumerate() {
            for axis in 0..3 {
                basis[[j, axis, k]] = bone[axis] * c;
            }
        }
    }

    // Mesh: two rings of four vertices per bone, one vertex per joint, and a
    // 13-vertex palm patch. 20*8 + 21 + 13 = 194.
    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut weights: Vec<[f64; JOINT_COUNT]> = Vec::new();
    let mut push = |v: [f64; 3], w: &[(usize, f64)]| {
        verts.push(v);
        let mut row = [0.0; JOINT_COUNT];
        for &(j, val) in w {
            row[j] += val;
        }
        weights.push(row);
    };

    for j in 1..JOINT_COUNT {
        let p = PARENTS[j] as usize;
        let a = [joints[[p, 0]], joints[[p, 1]], joints[[p, 2]]];
        let b = [joints[[j, 0]], joints[[j, 1]], joints[[j, 2]]];
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let n = vec3_norm(&d);
        let dir = [d[0] / n, d[1] / n, d[2] / n];
        // Orthonormal frame around the bone; dir lies in the x-y plane, so
        // +z is never parallel to it.
        let e1 = {
            let c = vec3_cross(&dir, &[0.0, 0.0, 1.0]);
            let cn = vec3_norm(&c);
            [c[0] / cn, c[1] / cn, c[2] / cn]
        };
        let e2 = vec3_cross(&dir, &e1);
        let r = if PARENTS[j] == 0 {
            config.tube_radius * 1.4 // palm-spanning bones are thicker
        } else {
            config.tube_radius
        };
        let grand = if p == 0 { None } else { Some(PARENTS[p] as usize) };
        for (u, near_w) in [(0.3, 0.75), (0.7, 0.9)] {
            let center = [
                a[0] + d[0] * u,
                a[1] + d[1] * u,
                a[2] + d[2] * u,
            ];
            let w: Vec<(usize, f64)> = match grand {
                Some(g) => vec![(p, near_w), (g, 1.0 - near_w)],
                None => vec![(p, 1.0)],
            };
            for (s1, s2) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)] {
                push(
                    [
                        center[0] + r * (s1 * e1[0] + s2 * e2[0]),
                        center[1] + r * (s1 * e1[1] + s2 * e2[1]),
                        center[2] + r * (s1 * e1[2] + s2 * e2[2]),
                    ],
                    &w,
                );
            }
        }
    }
    for j in 0..JOINT_COUNT {
        let pos = [joints[[j, 0]], joints[[j, 1]], joints[[j, 2]]];
        let w: Vec<(usize, f64)> = if j == 0 {
            vec![(0, 1.0)]
        } else {
            vec![(j, 0.6), (PARENTS[j] as usize, 0.4)]
        };
        push(pos, &w);
    }
    // Palm patch: a small grid between wrist and knuckles, wrist-weighted.
    for row in 0..3 {
        let rows = [3, 5, 5][row];
        let y = 0.02 + 0.022 * row as f64 * config.palm_scale;
        for i in 0..rows {
            let x = (i as f64 - (rows - 1) as f64 / 2.0) * 0.016 * config.palm_scale;
            push([x, y, -0.004], &[(0, 1.0)]);
        }
    }

    let v = verts.len();
    let rest_vertices =
        Array2::from_shape_vec((v, 3), verts.into_iter().flatten().collect()).unwrap();
    let skin_weights =
        Array2::from_shape_vec((v, JOINT_COUNT), weights.into_iter().flatten().collect()).unwrap();

    let template = HandTemplate {
        rest_vertices,
        skin_weights,
        shape_basis: basis,
        ..template_no_mesh
    };
    template.validate()?;
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_template_has_expected_topology() {
        let t = build_toy_template(&TemplateConfig::default()).unwrap();
        assert_eq!(t.joint_count(), 21);
        assert_eq!(t.vertex_count(), 194);
        // Thumb chain: wrist -> MCP -> PIP -> DIP -> TIP.
        assert_eq!(&t.parents[..5], &[-1, 0, 1, 2, 3]);
        // Wrist is the origin.
        assert_eq!(t.rest_joints.row(0).sum(), 0.0);
    }

    #[test]
    fn toy_template_is_deterministic() {
        let a = build_toy_template(&TemplateConfig::default()).unwrap();
        let b = build_toy_template(&TemplateConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn skin_weight_rows_are_convex() {
        let t = build_toy_template(&TemplateConfig::default()).unwrap();
        for row in t.skin_weights.rows() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rest_bone_lengths_positive() {
        let t = build_toy_template(&TemplateConfig::default()).unwrap();
        assert!(t.rest_bone_lengths().iter().all(|&l| l > 0.0));
    }

    #[test]
    fn root_shape_basis_is_zero() {
        // Keeps joint 0 pinned to the translation parameter for any beta.
        let t = build_toy_template(&TemplateConfig::default()).unwrap();
        assert!(t.shape_basis.slice(ndarray::s![0, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_and_templates_rejected() {
        let bad = TemplateConfig {
            palm_scale: 0.0,
            ..Default::default()
        };
        assert!(build_toy_template(&bad).is_err());

        let mut t = build_toy_template(&TemplateConfig::default()).unwrap();
        t.parents[5] = 9; // child precedes parent: not topologically ordered
        assert!(t.validate().is_err());
    }

    #[test]
    fn asset_round_trip() {
        let t = build_toy_template(&TemplateConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("template.mvh");
        t.save(&path).unwrap();
        let loaded = HandTemplate::load(&path).unwrap();
        assert_eq!(t, loaded);
    }

    #[test]
    fn asset_with_bad_shapes_rejected() {
        let t = build_toy_template(&TemplateConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("template.mvh");
        let mut file = ArrayFile::new();
        file.insert_f64("rest_joints", t.rest_joints.clone().into_dyn());
        // everything else missing
        file.save(&path).unwrap();
        assert!(HandTemplate::load(&path).is_err());
    }
}
