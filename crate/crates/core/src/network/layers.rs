//! Transformer building blocks.
//!
//! All blocks are pre-normalized and residual. Frame-level attention is plain
//! self-attention restricted to per-view row ranges (block-diagonal pattern);
//! the dense projections still run over the whole token sequence so the matrix
//! products stay large.

use crate::rng::SeededRng;
use crate::tensor::{ParamRef, ParamSet, Tape, Tensor};
use ndarray::{Array1, Array2};
use std::ops::Range;

const LN_EPS: f64 = 1e-5;

pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Linear {
    pub fn new(set: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        // Xavier-uniform keeps activation scale steady through the stack.
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = Array2::from_shape_fn((d_in, d_out), |_| rng.uniform(-limit, limit));
        Self {
            w: set.register(format!("{name}.w"), w.into_dyn()),
            b: set.register(format!("{name}.b"), Array1::<f64>::zeros(d_out).into_dyn()),
        }
    }

    /// Zero weights with a fixed bias; used for the last layer of the
    /// prediction heads so the initial output is exactly the bias.
    pub fn new_zeroed(
        set: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: Vec<f64>,
    ) -> Self {
        assert_eq!(bias.len(), d_out);
        Self {
            w: set.register(format!("{name}.w"), Array2::<f64>::zeros((d_in, d_out)).into_dyn()),
            b: set.register(format!("{name}.b"), Array1::from_vec(bias).into_dyn()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        x.linear(&w, &b)
    }
}

pub struct LayerNorm {
    pub gain: ParamRef,
    pub bias: ParamRef,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gain: set.register(format!("{name}.g"), Array1::<f64>::ones(d).into_dyn()),
            bias: set.register(format!("{name}.b"), Array1::<f64>::zeros(d).into_dyn()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let gain = tape.leaf(&self.gain);
        let bias = tape.leaf(&self.bias);
        x.layer_norm_affine(&gain, &bias, LN_EPS)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(set: &mut ParamSet, name: &str, d: usize, ratio: usize, rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::new(set, &format!("{name}.fc1"), d, d * ratio, rng),
            fc2: Linear::new(set, &format!("{name}.fc2"), d * ratio, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let hidden = self.fc1.forward(tape, x).gelu();
        self.fc2.forward(tape, &hidden)
    }
}

/// Multi-head attention among rows of `x`, restricted to each range in
/// `ranges` (tokens never attend across ranges).
fn ranged_attention(qkv: &Tensor, d: usize, heads: usize, ranges: &[Range<usize>]) -> Tensor {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut range_outputs = Vec::with_capacity(ranges.len());
    for range in ranges {
        let rows = qkv.slice_rows(range.start, range.end - range.start);
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = rows.slice_cols(h * dh, dh);
            let k = rows.slice_cols(d + h * dh, dh);
            let v = rows.slice_cols(2 * d + h * dh, dh);
            let attn = q.matmul_nt(&k, scale).softmax_last();
            head_outputs.push(attn.matmul(&v));
        }
        range_outputs.push(Tensor::concat_cols(&head_outputs));
    }
    if range_outputs.len() == 1 {
        range_outputs.pop().unwrap()
    } else {
        Tensor::concat_rows(&range_outputs)
    }
}

/// Pre-norm self-attention block: x + Attn(LN(x)); x + MLP(LN(x)).
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    d: usize,
}

impl Block {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(set, &format!("{name}.ln1"), d),
            qkv: Linear::new(set, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: Linear::new(set, &format!("{name}.proj"), d, d, rng),
            ln2: LayerNorm::new(set, &format!("{name}.ln2"), d),
            mlp: Mlp::new(set, &format!("{name}.mlp"), d, mlp_ratio, rng),
            heads,
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, ranges: &[Range<usize>]) -> Tensor {
        let normed = self.ln1.forward(tape, x);
        let qkv = self.qkv.forward(tape, &normed);
        let attn = ranged_attention(&qkv, self.d, self.heads, ranges);
        let x = x.add(&self.proj.forward(tape, &attn));
        let normed2 = self.ln2.forward(tape, &x);
        x.add(&self.mlp.forward(tape, &normed2))
    }
}

/// Pre-norm cross-attention block: queries attend to a fixed memory.
pub struct CrossBlock {
    ln_q: LayerNorm,
    ln_m: LayerNorm,
    q_proj: Linear,
    kv_proj: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    d: usize,
}

impl CrossBlock {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            ln_q: LayerNorm::new(set, &format!("{name}.ln_q"), d),
            ln_m: LayerNorm::new(set, &format!("{name}.ln_m"), d),
            q_proj: Linear::new(set, &format!("{name}.q"), d, d, rng),
            kv_proj: Linear::new(set, &format!("{name}.kv"), d, 2 * d, rng),
            proj: Linear::new(set, &format!("{name}.proj"), d, d, rng),
            ln2: LayerNorm::new(set, &format!("{name}.ln2"), d),
            mlp: Mlp::new(set, &format!("{name}.mlp"), d, mlp_ratio, rng),
            heads,
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape, queries: &Tensor, memory: &Tensor) -> Tensor {
        let d = self.d;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q_normed = self.ln_q.forward(tape, queries);
        let q_all = self.q_proj.forward(tape, &q_normed);
        let m_normed = self.ln_m.forward(tape, memory);
        let kv = self.kv_proj.forward(tape, &m_normed);
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = q_all.slice_cols(h * dh, dh);
            let k = kv.slice_cols(h * dh, dh);
            let v = kv.slice_cols(d + h * dh, dh);
            let attn = q.matmul_nt(&k, scale).softmax_last();
            heads_out.push(attn.matmul(&v));
        }
        let attn = Tensor::concat_cols(&heads_out);
        let x = queries.add(&self.proj.forward(tape, &attn));
        let normed2 = self.ln2.forward(tape, &x);
        x.add(&self.mlp.forward(tape, &normed2))
    }
}
