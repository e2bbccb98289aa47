//! mvhand-core: feed-forward multi-view hand reconstruction from uncalibrated images.
//!
//! The library jointly regresses a parametric hand (pose, shape, translation in the
//! first-camera frame) and per-view camera encodings from an arbitrary number of RGB
//! views, without camera calibration. It contains:
//!
//! - [`hand`]: a differentiable 21-joint parametric hand (forward kinematics +
//!   linear blend skinning) with a procedural toy template and an asset loader.
//! - [`camera`]: the 9-D camera encoding (translation, unit quaternion, field of
//!   view), perspective projection, and SO(3) geodesic distance.
//! - [`network`]: the toy-scale transformer — patch embedding, alternating
//!   frame/global attention, cross-attention refinement of hand and camera tokens,
//!   and the two prediction heads.
//! - [`losses`]: hand / camera / reprojection / negative-depth losses with
//!   availability indicators and exponentially weighted intermediate supervision.
//! - [`metrics`]: root-relative and Procrustes-aligned MPJPE/MPVPE and PCK-AUC.
//! - [`data`]: procedural multi-view scene synthesis, the on-disk dataset format,
//!   and the mixed single/multi-view batch schedule.
//! - [`train`]: gradient-accumulating AdamW training loop with warmup + cosine
//!   learning-rate schedule, gradient clipping, and resumable checkpoints.
//! - [`tensor`]: the reverse-mode autodiff engine everything differentiable runs on.
//!
//! All numerics are `f64` and deterministic for a fixed seed. Data-parallel inner
//! loops (matrix products, batch generation, batch evaluation) run on rayon when the
//! `parallel` feature is enabled (default) and fall back to sequential loops without
//! it; both paths produce bit-identical results.

pub mod camera;
pub mod data;
pub mod error;
pub mod hand;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
