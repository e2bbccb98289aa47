//! The on-disk dataset format.
//!
//! ```text
//! dataset/
//!   manifest.json            schema version, sample count, generator config, seed
//!   sample_000000/
//!     view_000.png           8-bit RGB
//!     view_001.png
//!     annot.json             joints2d, joints3d, cameras (9-vectors),
//!                            theta/beta/trans, supervision flags
//!   sample_000001/
//!     ...
//! ```
//!
//! Reading validates shapes and the projection-consistency invariant (stored
//! 2D joints must re-project from the stored 3D joints and cameras within
//! 1e-3 px); any violation names the offending sample.

use super::{GenConfig, MultiViewSample};
use crate::camera::CameraEncoding;
use crate::error::{Error, Result};
use crate::hand::HandParams;
use crate::losses::SupervisionFlags;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;
const LOAD_TOLERANCE_PX: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sample_count: usize,
    pub seed: u64,
    pub generator: GenConfig,
}

#[derive(Serialize, Deserialize)]
struct Annotations {
    sample_id: String,
    joints2d: Vec<Vec<[f64; 2]>>,
    joints3d: Vec<[f64; 3]>,
    cameras: Vec<[f64; 9]>,
    theta: Vec<f64>,
    beta: Vec<f64>,
    trans: [f64; 3],
    flags: SupervisionFlags,
}

fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:06}")
}

fn png_path(dir: &Path, view: usize) -> std::path::PathBuf {
    dir.join(format!("view_{view:03}.png"))
}

fn write_png(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32).0[c]
    }))
}

/// Write samples plus a manifest into `dir` (created if missing).
pub fn write_dataset(
    samples: &[MultiViewSample],
    dir: impl AsRef<Path>,
    seed: u64,
    generator: &GenConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        sample_count: samples.len(),
        seed,
        generator: generator.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    for (i, sample) in samples.iter().enumerate() {
        let sdir = dir.join(sample_dir_name(i));
        std::fs::create_dir_all(&sdir)?;
        for (v, view) in sample.views.iter().enumerate() {
            write_png(&png_path(&sdir, v), view)?;
        }
        let s = sample.view_count();
        let annot = Annotations {
            sample_id: sample.sample_id.clone(),
            joints2d: (0..s)
                .map(|v| {
                    (0..21)
                        .map(|j| [sample.joints2d[[v, j, 0]], sample.joints2d[[v, j, 1]]])
                        .collect()
                })
                .collect(),
            joints3d: (0..21)
                .map(|j| {
                    [
                        sample.joints3d[[j, 0]],
                        sample.joints3d[[j, 1]],
                        sample.joints3d[[j, 2]],
                    ]
                })
                .collect(),
            cameras: sample.cams.iter().map(|c| c.to_vec9()).collect(),
            theta: sample.hand.theta.clone(),
            beta: sample.hand.beta.clone(),
            trans: sample.hand.trans,
            flags: sample.flags,
        };
        std::fs::write(sdir.join("annot.json"), serde_json::to_string(&annot)?)?;
    }
    Ok(())
}

/// Read an entire dataset directory, validating every sample.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<MultiViewSample>)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).map_err(
            |e| Error::DatasetGlobal(format!("cannot read manifest in {}: {e}", dir.display())),
        )?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::DatasetGlobal(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let present = (0..)
        .take_while(|&i| dir.join(sample_dir_name(i)).is_dir())
        .count();
    if present != manifest.sample_count {
        return Err(Error::DatasetGlobal(format!(
            "manifest declares {} samples but {present} sample directories exist",
            manifest.sample_count
        )));
    }

    let mut samples = Vec::with_capacity(manifest.sample_count);
    for i in 0..manifest.sample_count {
        let sdir = dir.join(sample_dir_name(i));
        let annot: Annotations =
            serde_json::from_str(&std::fs::read_to_string(sdir.join("annot.json"))?).map_err(
                |e| Error::Dataset {
                    sample_id: sample_dir_name(i),
                    message: format!("bad annotations: {e}"),
                },
            )?;
        let s = annot.cameras.len();
        let mut views = Vec::with_capacity(s);
        for v in 0..s {
            views.push(read_png(&png_path(&sdir, v))?);
        }
        if annot.joints2d.len() != s
            || annot.joints2d.iter().any(|view| view.len() != 21)
            || annot.joints3d.len() != 21
        {
            return Err(Error::Dataset {
                sample_id: annot.sample_id,
                message: "annotation shapes invalid".into(),
            });
        }
        let joints2d = Array3::from_shape_fn((s, 21, 2), |(v, j, a)| annot.joints2d[v][j][a]);
        let joints3d = Array2::from_shape_fn((21, 3), |(j, a)| annot.joints3d[j][a]);
        let cams = annot
            .cameras
            .iter()
            .map(|v9| CameraEncoding::from_vec9(v9))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Dataset {
                sample_id: annot.sample_id.clone(),
                message: e.to_string(),
            })?;
        let sample = MultiViewSample {
            sample_id: annot.sample_id,
            views,
            joints2d,
            joints3d,
            cams,
            hand: HandParams {
                theta: annot.theta,
                beta: annot.beta,
                trans: annot.trans,
            },
            flags: annot.flags,
        };
        sample.validate(LOAD_TOLERANCE_PX)?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}
