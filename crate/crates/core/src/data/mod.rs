//! Synthetic multi-view data: sample types, procedural scene generation, the
//! on-disk dataset format, and the mixed single/multi-view batch schedule.

pub mod dataset;
pub mod schedule;
pub mod synth;

pub use dataset::{read_dataset, write_dataset, DatasetManifest};
pub use schedule::{build_schedule, BatchSchedule, MicroStep, ScheduleConfig, SourceKind};
pub use synth::{generate_batch, rasterize_view, sample_scene, GenConfig};

use crate::camera::CameraEncoding;
use crate::error::{Error, Result};
use crate::hand::HandParams;
use crate::losses::SupervisionFlags;
use ndarray::{Array2, Array3, Array4};

/// One training/evaluation sample: S rendered views of a single hand scene
/// with full ground truth in the first-camera frame.
#[derive(Debug, Clone)]
pub struct MultiViewSample {
    pub sample_id: String,
    /// S images, H x W x 3, 8-bit RGB.
    pub views: Vec<Array3<u8>>,
    /// Ground-truth 2D joints per view, pixels: [S, 21, 2].
    pub joints2d: Array3<f64>,
    /// Ground-truth 3D joints, meters, first-camera frame: [21, 3].
    pub joints3d: Array2<f64>,
    /// Per-view cameras relative to view 1; cams[0] is the identity pose.
    pub cams: Vec<CameraEncoding>,
    pub hand: HandParams,
    pub flags: SupervisionFlags,
}

impl MultiViewSample {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    /// Views as a normalized [S, H, W, 3] float tensor for the model.
    pub fn images_f64(&self) -> Array4<f64> {
        let s = self.views.len();
        let (h, w) = (self.views[0].shape()[0], self.views[0].shape()[1]);
        Array4::from_shape_fn((s, h, w, 3), |(v, y, x, c)| {
            self.views[v][[y, x, c]] as f64 / 255.0
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.views[0].shape()[0], self.views[0].shape()[1])
    }

    /// Structural checks plus the projection-consistency invariant: the stored
    /// 2D joints must re-project from the stored 3D joints and cameras within
    /// `tol_px` on every view.
    pub fn validate(&self, tol_px: f64) -> Result<()> {
        let s = self.views.len();
        if s == 0 {
            return self.fail("sample has no views");
        }
        if self.joints2d.shape() != [s, 21, 2] || self.joints3d.shape() != [21, 3] {
            return self.fail(format!(
                "annotation shapes joints2d {:?}, joints3d {:?}",
                self.joints2d.shape(),
                self.joints3d.shape()
            ));
        }
        if self.cams.len() != s {
            return self.fail("camera count differs from view count");
        }
        if self.flags.is_multiview != (s > 1) {
            return self.fail("is_multiview flag inconsistent with view count");
        }
        self.hand
            .validate()
            .map_err(|e| self.err(format!("hand params: {e}")))?;
        let (h, w) = self.image_size();
        for (v, cam) in self.cams.iter().enumerate() {
            cam.validate().map_err(|e| self.err(format!("camera {v}: {e}")))?;
            if self.views[v].shape() != [h, w, 3] {
                return self.fail(format!("view {v} has mismatched image shape"));
            }
        }
        if self.cams[0] != CameraEncoding::identity(self.cams[0].fov) {
            return self.fail("first camera is not the identity pose");
        }
        for (v, cam) in self.cams.iter().enumerate() {
            let k = cam.intrinsics(w, h).map_err(|e| self.err(e.to_string()))?;
            let (px, _) = crate::camera::project(&self.joints3d, &k, cam)
                .map_err(|e| self.err(e.to_string()))?;
            for j in 0..21 {
                for a in 0..2 {
                    let d = (px[[j, a]] - self.joints2d[[v, j, a]]).abs();
                    if !(d <= tol_px) {
                        return self.fail(format!(
                            "projection consistency violated on view {v} joint {j}: {d} px"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn err(&self, message: String) -> Error {
        Error::Dataset {
            sample_id: self.sample_id.clone(),
            message,
        }
    }

    fn fail(&self, message: impl Into<String>) -> Result<()> {
        Err(self.err(message.into()))
    }

    /// Restrict the sample to a subset of its views (indices into the current
    /// view list, first entry becomes the new reference view). Cameras are
    /// re-expressed relative to the new first view and the hand parameters and
    /// 3D joints move into its frame; 2D annotations are per-view and carry
    /// over unchanged. Flags are recomputed for the new view count, keeping
    /// the supervision kinds of the source sample.
    pub fn subset_views(&self, keep: &[usize]) -> Result<MultiViewSample> {
        if keep.is_empty() {
            return Err(self.err("subset_views: empty selection".into()));
        }
        let s = self.view_count();
        for &i in keep {
            if i >= s {
                return Err(self.err(format!("subset_views: view {i} out of range")));
            }
        }
        let kept_cams: Vec<CameraEncoding> = keep.iter().map(|&i| self.cams[i].clone()).collect();
        let cams = crate::camera::relative_to_first(&kept_cams)?;

        // Move the hand into the new reference frame. The hand pivots about
        // its root, so the transform is exact: Rg' = R0 Rg, trans' = R0 t + T0.
        let anchor = &self.cams[keep[0]];
        let r0 = anchor.rotation()?;
        let rg = crate::camera::axis_angle_to_rotmat(&[
            self.hand.theta[0],
            self.hand.theta[1],
            self.hand.theta[2],
        ]);
        let mut hand = self.hand.clone();
        hand.theta[..3]
            .copy_from_slice(&crate::camera::rotmat_to_axis_angle(&crate::camera::mat3_mul(
                &r0, &rg,
            )));
        hand.trans = crate::camera::vec3_add(
            &crate::camera::mat3_vec(&r0, &self.hand.trans),
            &anchor.t,
        );
        // Transform the stored joints directly rather than re-running the
        // kinematics; keeps subsetting independent of any template.
        let joints3d = {
            let mut out = Array2::<f64>::zeros((21, 3));
            for (j, row) in self.joints3d.rows().into_iter().enumerate() {
                let p = crate::camera::vec3_add(
                    &crate::camera::mat3_vec(&r0, &[row[0], row[1], row[2]]),
                    &anchor.t,
                );
                out[[j, 0]] = p[0];
                out[[j, 1]] = p[1];
                out[[j, 2]] = p[2];
            }
            out
        };

        let joints2d = Array3::from_shape_fn((keep.len(), 21, 2), |(v, j, a)| {
            self.joints2d[[keep[v], j, a]]
        });
        let views = keep.iter().map(|&i| self.views[i].clone()).collect();
        let mut flags = self.flags;
        flags.is_multiview = keep.len() > 1;
        Ok(MultiViewSample {
            sample_id: format!("{}#{:?}", self.sample_id, keep),
            views,
            joints2d,
            joints3d,
            cams,
            hand,
            flags,
        })
    }
}
