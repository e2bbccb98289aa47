//! The toy-scale reconstruction model.
//!
//! Pipeline: patch embedding with learned positions -> per-view camera and
//! register tokens -> an aggregator alternating frame-level (within-view) and
//! global (across-view) self-attention -> a stack of cross-attention blocks in
//! which learnable hand tokens and the per-view camera tokens query the image
//! tokens -> two parallel heads. The hand head regresses (theta, beta, trans);
//! the camera head regresses a 9-vector [T, q, fov] per view. Every refinement
//! block's predictions are kept for intermediate supervision.
//!
//! View 1 is the reference frame: its camera token carries a distinct
//! embedding, and its pose prediction is overwritten with the identity pose
//! (the field of view is still predicted — an uncalibrated camera's focal
//! length is unknown even for the reference view).

pub mod layers;

use crate::camera::CameraEncoding;
use crate::error::{Error, Result};
use crate::hand::{HandParams, HandParamsT, SHAPE_DIM, THETA_DIM};
use crate::rng::SeededRng;
use crate::tensor::{ParamSet, Tape, Tensor};
use layers::{Block, CrossBlock, Linear};
use ndarray::{Array1, Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Number of frame/global attention pairs in the aggregator.
    pub aggregator_depth: usize,
    /// Number of cross-attention refinement blocks (L).
    pub refine_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: (usize, usize),
    /// Learnable hand tokens concatenated before the hand head.
    pub hand_tokens: usize,
    pub register_tokens: usize,
    pub max_views: usize,
    /// Hidden width of the two-layer prediction heads.
    pub head_hidden: usize,
    /// Zero the final head layers so the initial prediction is the bias.
    pub zero_init_heads: bool,
    /// Initial hand depth in front of the reference camera, meters. Keeps all
    /// initial joint depths positive so the negative-depth penalty starts at 0.
    pub init_trans_z: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            aggregator_depth: 4,
            refine_blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 14,
            image_size: (112, 112),
            hand_tokens: 4,
            register_tokens: 4,
            max_views: 10,
            head_hidden: 256,
            zero_init_heads: true,
            init_trans_z: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if self.refine_blocks < 1 || self.hand_tokens < 1 || self.max_views < 1 {
            return Err(Error::Config(
                "refine_blocks, hand_tokens, and max_views must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn patches_per_view(&self) -> usize {
        (self.image_size.0 / self.patch_size) * (self.image_size.1 / self.patch_size)
    }

    fn tokens_per_view(&self) -> usize {
        1 + self.register_tokens + self.patches_per_view()
    }
}

/// Token activations after aggregation; register tokens are already dropped.
pub struct TokenState {
    /// [S * P, embed_dim], view-major.
    pub image: Tensor,
    /// [S, embed_dim].
    pub camera: Tensor,
    /// [hand_tokens, embed_dim].
    pub hand: Tensor,
    pub views: usize,
    pub patches_per_view: usize,
}

/// Per-view camera prediction in graph form. `q_raw` is the unnormalized
/// quaternion as emitted by the head; consumers normalize in-graph.
#[derive(Clone)]
pub struct CameraPredT {
    pub t: Tensor,     // [3]
    pub q_raw: Tensor, // [4]
    pub fov: Tensor,   // [2], already mapped into (0, pi)
}

impl CameraPredT {
    pub fn from_encoding(enc: &CameraEncoding) -> Self {
        Self {
            t: Tensor::constant(Array1::from_vec(enc.t.to_vec()).into_dyn()),
            q_raw: Tensor::constant(Array1::from_vec(enc.q.to_vec()).into_dyn()),
            fov: Tensor::constant(Array1::from_vec(enc.fov.to_vec()).into_dyn()),
        }
    }

    pub fn variables_from_encoding(enc: &CameraEncoding) -> Self {
        Self {
            t: Tensor::variable(Array1::from_vec(enc.t.to_vec()).into_dyn()),
            q_raw: Tensor::variable(Array1::from_vec(enc.q.to_vec()).into_dyn()),
            fov: Tensor::variable(Array1::from_vec(enc.fov.to_vec()).into_dyn()),
        }
    }

    /// Plain encoding: quaternion normalized with w >= 0.
    pub fn encoding(&self) -> Result<CameraEncoding> {
        let t = self.t.value();
        let q = self.q_raw.value();
        let f = self.fov.value();
        CameraEncoding::new(
            [t[[0]], t[[1]], t[[2]]],
            [q[[0]], q[[1]], q[[2]], q[[3]]],
            [f[[0]], f[[1]]],
        )
    }
}

pub struct BlockPrediction {
    pub hand: HandParamsT,
    pub cams: Vec<CameraPredT>,
}

/// Predictions from every refinement block; the last entry is the final
/// output, earlier ones feed intermediate supervision.
pub struct ModelOutput {
    pub blocks: Vec<BlockPrediction>,
}

impl ModelOutput {
    pub fn views(&self) -> usize {
        self.blocks[0].cams.len()
    }

    pub fn final_block(&self) -> &BlockPrediction {
        self.blocks.last().unwrap()
    }

    /// Plain values of the final block.
    pub fn final_values(&self) -> Result<(HandParams, Vec<CameraEncoding>)> {
        let b = self.final_block();
        let cams = b
            .cams
            .iter()
            .map(|c| c.encoding())
            .collect::<Result<Vec<_>>>()?;
        Ok((b.hand.values(), cams))
    }

    /// Build an output from plain per-block values (constants, no gradients).
    /// Used by loss tests and oracles.
    pub fn from_values(blocks: &[(HandParams, Vec<CameraEncoding>)]) -> Self {
        Self {
            blocks: blocks
                .iter()
                .map(|(hand, cams)| BlockPrediction {
                    hand: HandParamsT::from_values(hand),
                    cams: cams.iter().map(CameraPredT::from_encoding).collect(),
                })
                .collect(),
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    params: ParamSet,
    patch_embed: Linear,
    pos_embed: crate::tensor::ParamRef,
    camera_token_ref: crate::tensor::ParamRef,
    camera_token_other: crate::tensor::ParamRef,
    register_tokens: crate::tensor::ParamRef,
    hand_tokens: crate::tensor::ParamRef,
    frame_blocks: Vec<Block>,
    global_blocks: Vec<Block>,
    refine_blocks: Vec<CrossBlock>,
    hand_head: (Linear, Linear),
    camera_head: (Linear, Linear),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut set = ParamSet::new();
        let d = config.embed_dim;
        let p = config.patches_per_view();
        let patch_dim = config.patch_size * config.patch_size * 3;

        let patch_embed = Linear::new(&mut set, "patch_embed", patch_dim, d, &mut rng);
        let token_init = |rng: &mut SeededRng, rows: usize, d: usize| {
            Array2::from_shape_fn((rows, d), |_| rng.normal() * 0.02)
        };
        let pos_embed = set.register("pos_embed", token_init(&mut rng, p, d).into_dyn());
        let camera_token_ref =
            set.register("camera_token_ref", token_init(&mut rng, 1, d).into_dyn());
        let camera_token_other =
            set.register("camera_token_other", token_init(&mut rng, 1, d).into_dyn());
        let register_tokens = set.register(
            "register_tokens",
            token_init(&mut rng, config.register_tokens, d).into_dyn(),
        );
        let hand_tokens = set.register(
            "hand_tokens",
            token_init(&mut rng, config.hand_tokens, d).into_dyn(),
        );

        let mut frame_blocks = Vec::new();
        let mut global_blocks = Vec::new();
        for i in 0..config.aggregator_depth {
            frame_blocks.push(Block::new(
                &mut set,
                &format!("agg.{i}.frame"),
                d,
                config.heads,
                config.mlp_ratio,
                &mut rng,
            ));
            global_blocks.push(Block::new(
                &mut set,
                &format!("agg.{i}.global"),
                d,
                config.heads,
                config.mlp_ratio,
                &mut rng,
            ));
        }
        let refine_blocks = (0..config.refine_blocks)
            .map(|i| {
                CrossBlock::new(
                    &mut set,
                    &format!("refine.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();

        // Hand head: flattened hand tokens -> hidden -> 61 = 48 + 10 + 3.
        let hand_out = THETA_DIM + SHAPE_DIM + 3;
        let mut hand_bias = vec![0.0; hand_out];
        hand_bias[hand_out - 1] = config.init_trans_z;
        let hand_fc1 = Linear::new(
            &mut set,
            "hand_head.fc1",
            config.hand_tokens * d,
            config.head_hidden,
            &mut rng,
        );
        let hand_fc2 = if config.zero_init_heads {
            Linear::new_zeroed(&mut set, "hand_head.fc2", config.head_hidden, hand_out, hand_bias)
        } else {
            let l = Linear::new(&mut set, "hand_head.fc2", config.head_hidden, hand_out, &mut rng);
            l.b.set_value(Array1::from_vec(hand_bias).into_dyn());
            l
        };

        // Camera head: per-view token -> hidden -> 9 = T(3) + q(4) + fov(2).
        // Bias the raw quaternion to identity; raw fov 0 maps to pi/2.
        let cam_bias = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let cam_fc1 = Linear::new(&mut set, "camera_head.fc1", d, config.head_hidden, &mut rng);
        let cam_fc2 = if config.zero_init_heads {
            Linear::new_zeroed(&mut set, "camera_head.fc2", config.head_hidden, 9, cam_bias)
        } else {
            let l = Linear::new(&mut set, "camera_head.fc2", config.head_hidden, 9, &mut rng);
            l.b.set_value(Array1::from_vec(cam_bias).into_dyn());
            l
        };

        Ok(Self {
            config,
            params: set,
            patch_embed,
            pos_embed,
            camera_token_ref,
            camera_token_other,
            register_tokens,
            hand_tokens,
            frame_blocks,
            global_blocks,
            refine_blocks,
            hand_head: (hand_fc1, hand_fc2),
            camera_head: (cam_fc1, cam_fc2),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn new_tape(&self) -> Tape {
        Tape::new(self.params.len())
    }

    fn validate_images(&self, images: &Array4<f64>) -> Result<(usize, usize, usize)> {
        let shape = images.shape();
        let (s, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (eh, ew) = self.config.image_size;
        if h != eh || w != ew || c != 3 {
            return Err(Error::shape(
                "embed_views",
                format!("S x {eh} x {ew} x 3"),
                format!("{shape:?}"),
            ));
        }
        if s == 0 || s > self.config.max_views {
            return Err(Error::invalid(format!(
                "view count {s} outside 1..={}",
                self.config.max_views
            )));
        }
        if !images.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(
                "images must be normalized to [0, 1] and finite",
            ));
        }
        Ok((s, h, w))
    }

    /// Patchify, embed, and aggregate the views into a [`TokenState`].
    pub fn embed_views(&self, tape: &mut Tape, images: &Array4<f64>) -> Result<TokenState> {
        let (s, _h, _w) = self.validate_images(images)?;
        let cfg = &self.config;
        let ps = cfg.patch_size;
        let (gh, gw) = (cfg.image_size.0 / ps, cfg.image_size.1 / ps);
        let p = gh * gw;
        let d = cfg.embed_dim;
        let _ = d;

        // [S*P, patch_dim] in view-major, row-major-within-patch order.
        let patch_dim = ps * ps * 3;
        let mut patches = Array2::<f64>::zeros((s * p, patch_dim));
        for v in 0..s {
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = v * p + gy * gw + gx;
                    let mut col = 0;
                    for py in 0..ps {
                        for px in 0..ps {
                            for c in 0..3 {
                                patches[[row, col]] = images[[v, gy * ps + py, gx * ps + px, c]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }

        let embedded = self
            .patch_embed
            .forward(tape, &Tensor::constant(patches.into_dyn()));
        let pos = tape.leaf(&self.pos_embed);
        let pos_tiled = Tensor::concat_rows(&vec![pos; s]);
        let embedded = embedded.add(&pos_tiled);

        // Per-view sequences: [camera, registers, patches].
        let cam_ref = tape.leaf(&self.camera_token_ref);
        let cam_other = tape.leaf(&self.camera_token_other);
        let regs = tape.leaf(&self.register_tokens);
        let mut groups = Vec::with_capacity(3 * s);
        for v in 0..s {
            groups.push(if v == 0 { cam_ref.clone() } else { cam_other.clone() });
            groups.push(regs.clone());
            groups.push(embedded.slice_rows(v * p, p));
        }
        let mut x = Tensor::concat_rows(&groups);

        let tpv = cfg.tokens_per_view();
        let frame_ranges: Vec<_> = (0..s).map(|v| v * tpv..(v + 1) * tpv).collect();
        let global_range = [0..s * tpv];
        for (frame, global) in self.frame_blocks.iter().zip(&self.global_blocks) {
            x = frame.forward(tape, &x, &frame_ranges);
            x = global.forward(tape, &x, &global_range);
        }

        // Keep camera and patch tokens; registers are dropped here.
        let camera = Tensor::concat_rows(
            &(0..s).map(|v| x.slice_rows(v * tpv, 1)).collect::<Vec<_>>(),
        );
        let image = Tensor::concat_rows(
            &(0..s)
                .map(|v| x.slice_rows(v * tpv + 1 + cfg.register_tokens, p))
                .collect::<Vec<_>>(),
        );
        Ok(TokenState {
            image,
            camera,
            hand: tape.leaf(&self.hand_tokens),
            views: s,
            patches_per_view: p,
        })
    }

    /// Run the cross-attention refinement stack, returning the token state
    /// after every block.
    pub fn refine(&self, tape: &mut Tape, state: &TokenState) -> Vec<TokenState> {
        let nh = self.config.hand_tokens;
        let s = state.views;
        let mut queries = Tensor::concat_rows(&[state.hand.clone(), state.camera.clone()]);
        let mut out = Vec::with_capacity(self.refine_blocks.len());
        for block in &self.refine_blocks {
            queries = block.forward(tape, &queries, &state.image);
            out.push(TokenState {
                image: state.image.clone(),
                camera: queries.slice_rows(nh, s),
                hand: queries.slice_rows(0, nh),
                views: s,
                patches_per_view: state.patches_per_view,
            });
        }
        out
    }

    /// Decode hand tokens into (theta, beta, trans).
    pub fn decode_hand(&self, tape: &mut Tape, hand_tokens: &Tensor) -> HandParamsT {
        let nh = self.config.hand_tokens;
        let d = self.config.embed_dim;
        let flat = hand_tokens.reshape(&[1, nh * d]);
        let hidden = self.hand_head.0.forward(tape, &flat).gelu();
        let out = self.hand_head.1.forward(tape, &hidden).reshape(&[61]);
        HandParamsT {
            theta: out.slice_rows(0, THETA_DIM),
            beta: out.slice_rows(THETA_DIM, SHAPE_DIM),
            trans: out.slice_rows(THETA_DIM + SHAPE_DIM, 3),
        }
    }

    /// Decode per-view camera tokens into camera predictions. View 1's pose is
    /// hard-set to the identity (its field of view stays predicted).
    pub fn decode_camera(&self, tape: &mut Tape, camera_tokens: &Tensor) -> Vec<CameraPredT> {
        let s = camera_tokens.shape()[0];
        let hidden = self.camera_head.0.forward(tape, camera_tokens).gelu();
        let out = self.camera_head.1.forward(tape, &hidden); // [S, 9]
        (0..s)
            .map(|v| {
                let row = out.slice_rows(v, 1).reshape(&[9]);
                let fov = row
                    .slice_rows(7, 2)
                    .sigmoid()
                    .mul_scalar(std::f64::consts::PI);
                if v == 0 {
                    CameraPredT {
                        t: Tensor::constant(Array1::<f64>::zeros(3).into_dyn()),
                        q_raw: Tensor::constant(
                            ndarray::arr1(&crate::camera::IDENTITY_QUAT).into_dyn(),
                        ),
                        fov,
                    }
                } else {
                    CameraPredT {
                        t: row.slice_rows(0, 3),
                        q_raw: row.slice_rows(3, 4),
                        fov,
                    }
                }
            })
            .collect()
    }

    /// Full forward pass: embed, refine, decode at every block.
    pub fn forward_full(&self, images: &Array4<f64>) -> Result<(ModelOutput, Tape)> {
        let mut tape = self.new_tape();
        let state = self.embed_views(&mut tape, images)?;
        let refined = self.refine(&mut tape, &state);
        let blocks = refined
            .iter()
            .map(|st| BlockPrediction {
                hand: self.decode_hand(&mut tape, &st.hand),
                cams: self.decode_camera(&mut tape, &st.camera),
            })
            .collect();
        Ok((ModelOutput { blocks }, tape))
    }

    // -- checkpoint support ---------------------------------------------

    /// Snapshot of all parameter values, in registration order.
    pub fn state_arrays(&self) -> Vec<(String, ArrayD<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name().to_string(), (*p.value()).clone()))
            .collect()
    }

    /// Restore parameter values; names and shapes must match exactly.
    pub fn load_state_arrays(&self, state: &[(String, ArrayD<f64>)]) -> Result<()> {
        if state.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint {}, model {}",
                state.len(),
                self.params.len()
            )));
        }
        for (p, (name, value)) in self.params.iter().zip(state) {
            if p.name() != name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: '{}' vs '{name}'",
                    p.name()
                )));
            }
            if p.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' shape {:?} vs {:?}",
                    p.shape(),
                    value.shape()
                )));
            }
            p.set_value(value.clone());
        }
        Ok(())
    }
}
