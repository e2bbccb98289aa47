//! Differentiable operations.
//!
//! Each constructor validates shapes, computes the forward value eagerly, and
//! records an [`Op`] carrying whatever the backward rule needs. Backward rules
//! accumulate into parents via `acc_grad`/`acc_grad_with`.

use super::{Node, Tensor};
use crate::par;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, Slice};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// y = m*x + b with constant m, b.
    Affine { m: f64, b: f64 },
    /// y = a * s with a 0-d tensor s.
    Scale,
    Matmul,
    /// y = alpha * a @ b^T; the attention-score pattern.
    MatmulNT { alpha: f64 },
    /// y = x @ w + b; parents [x, w, b].
    Linear,
    Transpose2,
    Reshape,
    ConcatRows { sizes: Vec<usize> },
    ConcatCols { sizes: Vec<usize> },
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    SumAll,
    MeanAll,
    AddRow,
    MulRow,
    MulCol,
    SoftmaxLast,
    LayerNormLast { rstd: Array1<f64> },
    /// y = normalize(x) * gain + bias rowwise; parents [x, gain, bias].
    LayerNormAffine { rstd: Array1<f64>, normed: Array2<f64> },
    /// Saved tanh(u) from the forward pass avoids recomputing it backward.
    Gelu { t: ArrayD<f64> },
    Sigmoid,
    Relu,
    Sqrt,
    Square,
    Sin,
    Cos,
    AcosClamped,
    Hat,
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// Owned copy in row-major order; reshape requires it.
fn to_standard(a: &ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl Tensor {
    fn assert_same_shape(&self, other: &Tensor, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data = &*self.0.data + &*other.0.data;
        Tensor::new_op(data, vec![self.clone(), other.clone()], Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data = &*self.0.data - &*other.0.data;
        Tensor::new_op(data, vec![self.clone(), other.clone()], Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data = &*self.0.data * &*other.0.data;
        Tensor::new_op(data, vec![self.clone(), other.clone()], Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "div");
        let data = &*self.0.data / &*other.0.data;
        Tensor::new_op(data, vec![self.clone(), other.clone()], Op::Div)
    }

    pub fn affine(&self, m: f64, b: f64) -> Tensor {
        let data = self.0.data.mapv(|x| m * x + b);
        Tensor::new_op(data, vec![self.clone()], Op::Affine { m, b })
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn add_scalar(&self, b: f64) -> Tensor {
        self.affine(1.0, b)
    }

    pub fn mul_scalar(&self, m: f64) -> Tensor {
        self.affine(m, 0.0)
    }

    /// c - x for constant c.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.affine(-1.0, c)
    }

    /// Multiply by a 0-d tensor.
    pub fn scale(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.0.data.ndim(), 0, "scale expects a 0-d factor");
        let sv = s.scalar();
        let data = self.0.data.mapv(|x| x * sv);
        Tensor::new_op(data, vec![self.clone(), s.clone()], Op::Scale)
    }

    /// Divide by a 0-d tensor.
    pub fn scale_div(&self, s: &Tensor) -> Tensor {
        let one = Tensor::scalar_value(1.0);
        self.scale(&one.div(s))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = view2(&self.0.data);
        let b = view2(&other.0.data);
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
        let data = par::matmul(a, b).into_dyn();
        Tensor::new_op(data, vec![self.clone(), other.clone()], Op::Matmul)
    }

    /// `alpha * self @ other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor, alpha: f64) -> Tensor {
        let a = view2(&self.0.data);
        let b = view2(&other.0.data);
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt inner dims");
        let mut out = ndarray::Array2::<f64>::zeros((a.nrows(), b.nrows()));
        ndarray::linalg::general_mat_mul(alpha, &a, &b.t(), 0.0, &mut out);
        Tensor::new_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Op::MatmulNT { alpha },
        )
    }

    /// Fused `self @ w + b` (bias broadcast over rows).
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Tensor {
        let x = view2(&self.0.data);
        let wv = view2(&w.0.data);
        assert_eq!(x.ncols(), wv.nrows(), "linear inner dims");
        assert_eq!(b.shape(), &[wv.ncols()], "linear bias length");
        let mut out = par::matmul(x, wv);
        let bv = b.0.data.view().into_dimensionality::<Ix1>().unwrap();
        out += &bv;
        Tensor::new_op(
            out.into_dyn(),
            vec![self.clone(), w.clone(), b.clone()],
            Op::Linear,
        )
    }

    pub fn t_op(&self) -> Tensor {
        let data = view2(&self.0.data)
            .t()
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        Tensor::new_op(data, vec![self.clone()], Op::Transpose2)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let data = to_standard(&self.0.data)
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        Tensor::new_op(data, vec![self.clone()], Op::Reshape)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.0.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        let sizes = parts.iter().map(|p| p.shape()[0]).collect();
        Tensor::new_op(data, parts.to_vec(), Op::ConcatRows { sizes })
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.0.data.view()).collect();
        let data = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let sizes = parts.iter().map(|p| p.shape()[1]).collect();
        Tensor::new_op(data, parts.to_vec(), Op::ConcatCols { sizes })
    }

    /// Rows `start..start+len` along axis 0 (any rank >= 1).
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape()[0], "slice_rows out of range");
        let data = self
            .0
            .data
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        Tensor::new_op(data, vec![self.clone()], Op::SliceRows { start, len })
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(self.0.data.ndim() == 2 && start + len <= self.shape()[1]);
        let data = self
            .0
            .data
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        Tensor::new_op(data, vec![self.clone()], Op::SliceCols { start, len })
    }

    pub fn sum_all(&self) -> Tensor {
        let data = ndarray::arr0(self.0.data.sum()).into_dyn();
        Tensor::new_op(data, vec![self.clone()], Op::SumAll)
    }

    pub fn mean_all(&self) -> Tensor {
        let data = ndarray::arr0(self.0.data.sum() / self.0.data.len() as f64).into_dyn();
        Tensor::new_op(data, vec![self.clone()], Op::MeanAll)
    }

    /// `[n,d] + [d]` broadcast over rows.
    pub fn add_row(&self, v: &Tensor) -> Tensor {
        assert_eq!(self.0.data.ndim(), 2);
        assert_eq!(v.shape(), &[self.shape()[1]], "add_row vector length");
        let vv = v.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let data = (&view2(&self.0.data) + &vv).into_dyn();
        Tensor::new_op(data, vec![self.clone(), v.clone()], Op::AddRow)
    }

    pub fn sub_row(&self, v: &Tensor) -> Tensor {
        self.add_row(&v.neg())
    }

    /// `[n,d] * [d]` broadcast over rows.
    pub fn mul_row(&self, v: &Tensor) -> Tensor {
        assert_eq!(self.0.data.ndim(), 2);
        assert_eq!(v.shape(), &[self.shape()[1]], "mul_row vector length");
        let vv = v.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let data = (&view2(&self.0.data) * &vv).into_dyn();
        Tensor::new_op(data, vec![self.clone(), v.clone()], Op::MulRow)
    }

    /// `[n,d] * [n]` broadcast over columns.
    pub fn mul_col(&self, c: &Tensor) -> Tensor {
        assert_eq!(self.0.data.ndim(), 2);
        assert_eq!(c.shape(), &[self.shape()[0]], "mul_col vector length");
        let cc = c
            .0
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .insert_axis(Axis(1));
        let data = (&view2(&self.0.data) * &cc).into_dyn();
        Tensor::new_op(data, vec![self.clone(), c.clone()], Op::MulCol)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_last(&self) -> Tensor {
        let x = view2(&self.0.data);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Tensor::new_op(out.into_dyn(), vec![self.clone()], Op::SoftmaxLast)
    }

    /// Row-wise normalization to zero mean / unit variance (no affine part).
    pub fn layer_norm_last(&self, eps: f64) -> Tensor {
        let x = view2(&self.0.data);
        let n = x.nrows();
        let mut out = x.to_owned();
        let mut rstd = Array1::<f64>::zeros(n);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            row.mapv_inplace(|v| (v - mean) * r);
        }
        Tensor::new_op(
            out.into_dyn(),
            vec![self.clone()],
            Op::LayerNormLast { rstd },
        )
    }

    /// Fused layer norm with learned gain and bias: rowwise
    /// `normalize(x) * gain + bias`.
    pub fn layer_norm_affine(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let x = view2(&self.0.data);
        let (n, d) = (x.nrows(), x.ncols());
        assert_eq!(gain.shape(), &[d]);
        assert_eq!(bias.shape(), &[d]);
        let gv = gain.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let bv = bias.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let mut normed = x.to_owned();
        let mut rstd = Array1::<f64>::zeros(n);
        for (i, mut row) in normed.rows_mut().into_iter().enumerate() {
            let dd = d as f64;
            let mean = row.sum() / dd;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dd;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            row.mapv_inplace(|v| (v - mean) * r);
        }
        let mut out = Array2::<f64>::zeros((n, d));
        for ((mut orow, nrow), _) in out.rows_mut().into_iter().zip(normed.rows()).zip(0..) {
            for (j, o) in orow.iter_mut().enumerate() {
                *o = nrow[j] * gv[j] + bv[j];
            }
        }
        Tensor::new_op(
            out.into_dyn(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Op::LayerNormAffine { rstd, normed },
        )
    }

    pub fn gelu(&self) -> Tensor {
        let t = self.0.data.mapv(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            u.tanh()
        });
        let data = ndarray::Zip::from(&*self.0.data)
            .and(&t)
            .map_collect(|&x, &tv| 0.5 * x * (1.0 + tv));
        Tensor::new_op(data, vec![self.clone()], Op::Gelu { t })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.0.data.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Tensor::new_op(data, vec![self.clone()], Op::Sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.0.data.mapv(|x| x.max(0.0));
        Tensor::new_op(data, vec![self.clone()], Op::Relu)
    }

    pub fn sqrt_op(&self) -> Tensor {
        let data = self.0.data.mapv(f64::sqrt);
        Tensor::new_op(data, vec![self.clone()], Op::Sqrt)
    }

    pub fn square(&self) -> Tensor {
        let data = self.0.data.mapv(|x| x * x);
        Tensor::new_op(data, vec![self.clone()], Op::Square)
    }

    pub fn sin_op(&self) -> Tensor {
        let data = self.0.data.mapv(f64::sin);
        Tensor::new_op(data, vec![self.clone()], Op::Sin)
    }

    pub fn cos_op(&self) -> Tensor {
        let data = self.0.data.mapv(f64::cos);
        Tensor::new_op(data, vec![self.clone()], Op::Cos)
    }

    /// arccos of the input clamped to [-1, 1]. The gradient is zero where the
    /// clamp is active.
    pub fn acos_clamped(&self) -> Tensor {
        let data = self.0.data.mapv(|x| x.clamp(-1.0, 1.0).acos());
        Tensor::new_op(data, vec![self.clone()], Op::AcosClamped)
    }

    /// Skew-symmetric (cross-product) matrix of a 3-vector.
    pub fn hat(&self) -> Tensor {
        assert_eq!(self.shape(), &[3], "hat expects a 3-vector");
        let v = &self.0.data;
        let (x, y, z) = (v[[0]], v[[1]], v[[2]]);
        let k = ndarray::arr2(&[[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]]).into_dyn();
        Tensor::new_op(k, vec![self.clone()], Op::Hat)
    }
}

impl Op {
    pub(crate) fn backward(&self, node: &Node, g: &ArrayD<f64>) {
        let parents = &node.parents;
        let wants = |i: usize| parents[i].0.needs_grad;
        match self {
            Op::Leaf => {}
            Op::Add => {
                if wants(0) {
                    parents[0].acc_grad(g);
                }
                if wants(1) {
                    parents[1].acc_grad(g);
                }
            }
            Op::Sub => {
                if wants(0) {
                    parents[0].acc_grad(g);
                }
                if wants(1) {
                    parents[1].acc_grad_with(|buf| *buf -= g);
                }
            }
            Op::Mul => {
                if wants(0) {
                    parents[0].acc_grad_owned(g * &*parents[1].0.data);
                }
                if wants(1) {
                    parents[1].acc_grad_owned(g * &*parents[0].0.data);
                }
            }
            Op::Div => {
                let b = &*parents[1].0.data;
                if wants(0) {
                    parents[0].acc_grad_owned(g / b);
                }
                if wants(1) {
                    let a = &*parents[0].0.data;
                    parents[1].acc_grad_owned(-(g * a) / (b * b));
                }
            }
            Op::Affine { m, .. } => {
                if wants(0) {
                    parents[0].acc_grad_owned(g.mapv(|v| v * m));
                }
            }
            Op::Scale => {
                let sv = parents[1].scalar();
                if wants(0) {
                    parents[0].acc_grad_owned(g.mapv(|v| v * sv));
                }
                if wants(1) {
                    let contrib = (g * &*parents[0].0.data).sum();
                    parents[1].acc_grad_owned(ndarray::arr0(contrib).into_dyn());
                }
            }
            Op::Matmul => {
                let g2 = view2(g);
                let a = view2(&parents[0].0.data);
                let b = view2(&parents[1].0.data);
                if wants(0) {
                    parents[0].acc_grad_owned(par::matmul(g2, b.t()).into_dyn());
                }
                if wants(1) {
                    parents[1].acc_grad_owned(par::matmul(a.t(), g2).into_dyn());
                }
            }
            Op::MatmulNT { alpha } => {
                // y = alpha a b^T => da = alpha g b; db = alpha g^T a
                let g2 = view2(g);
                let a = view2(&parents[0].0.data);
                let b = view2(&parents[1].0.data);
                if wants(0) {
                    let mut da = Array2::<f64>::zeros((a.nrows(), a.ncols()));
                    ndarray::linalg::general_mat_mul(*alpha, &g2, &b, 0.0, &mut da);
                    parents[0].acc_grad_owned(da.into_dyn());
                }
                if wants(1) {
                    let mut db = Array2::<f64>::zeros((b.nrows(), b.ncols()));
                    ndarray::linalg::general_mat_mul(*alpha, &g2.t(), &a, 0.0, &mut db);
                    parents[1].acc_grad_owned(db.into_dyn());
                }
            }
            Op::Linear => {
                let g2 = view2(g);
                let x = view2(&parents[0].0.data);
                let w = view2(&parents[1].0.data);
                if wants(0) {
                    parents[0].acc_grad_owned(par::matmul(g2, w.t()).into_dyn());
                }
                if wants(1) {
                    parents[1].acc_grad_owned(par::matmul(x.t(), g2).into_dyn());
                }
                if wants(2) {
                    parents[2].acc_grad_owned(g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Transpose2 => {
                if wants(0) {
                    parents[0].acc_grad_owned(view2(g).t().as_standard_layout().into_owned().into_dyn());
                }
            }
            Op::Reshape => {
                if wants(0) {
                    let shape = parents[0].shape().to_vec();
                    parents[0]
                        .acc_grad_owned(to_standard(g).into_shape_with_order(IxDyn(&shape)).unwrap());
                }
            }
            Op::ConcatRows { sizes } => {
                let mut start = 0;
                for (p, &len) in parents.iter().zip(sizes) {
                    if p.0.needs_grad {
                        let part = g.slice_axis(Axis(0), Slice::from(start..start + len));
                        p.acc_grad_with(|buf| *buf += &part);
                    }
                    start += len;
                }
            }
            Op::ConcatCols { sizes } => {
                let mut start = 0;
                for (p, &len) in parents.iter().zip(sizes) {
                    if p.0.needs_grad {
                        let part = g.slice_axis(Axis(1), Slice::from(start..start + len));
                        p.acc_grad_with(|buf| *buf += &part);
                    }
                    start += len;
                }
            }
            Op::SliceRows { start, len } => {
                if wants(0) {
                    let (s, l) = (*start, *len);
                    parents[0].acc_grad_with(|buf| {
                        let mut region = buf.slice_axis_mut(Axis(0), Slice::from(s..s + l));
                        region += g;
                    });
                }
            }
            Op::SliceCols { start, len } => {
                if wants(0) {
                    let (s, l) = (*start, *len);
                    parents[0].acc_grad_with(|buf| {
                        let mut region = buf.slice_axis_mut(Axis(1), Slice::from(s..s + l));
                        region += g;
                    });
                }
            }
            Op::SumAll => {
                if wants(0) {
                    let gs = *g.first().unwrap();
                    parents[0].acc_grad_with(|buf| *buf += gs);
                }
            }
            Op::MeanAll => {
                if wants(0) {
                    let gs = *g.first().unwrap() / parents[0].0.data.len() as f64;
                    parents[0].acc_grad_with(|buf| *buf += gs);
                }
            }
            Op::AddRow => {
                if wants(0) {
                    parents[0].acc_grad(g);
                }
                if wants(1) {
                    parents[1].acc_grad_owned(view2(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulRow => {
                let a = view2(&parents[0].0.data);
                let v = parents[1]
                    .0
                    .data
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let g2 = view2(g);
                if wants(0) {
                    parents[0].acc_grad_owned((&g2 * &v).into_dyn());
                }
                if wants(1) {
                    parents[1].acc_grad_owned((&g2 * &a).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulCol => {
                let a = view2(&parents[0].0.data);
                let c = parents[1]
                    .0
                    .data
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .insert_axis(Axis(1));
                let g2 = view2(g);
                if wants(0) {
                    parents[0].acc_grad_owned((&g2 * &c).into_dyn());
                }
                if wants(1) {
                    parents[1].acc_grad_owned((&g2 * &a).sum_axis(Axis(1)).into_dyn());
                }
            }
            Op::SoftmaxLast => {
                if wants(0) {
                    let y = view2(&node.data);
                    let g2 = view2(g);
                    let mut dx = Array2::<f64>::zeros(y.raw_dim());
                    for ((grow, yrow), mut drow) in
                        g2.rows().into_iter().zip(y.rows()).zip(dx.rows_mut())
                    {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = yv * (gv - dot);
                        }
                    }
                    parents[0].acc_grad_owned(dx.into_dyn());
                }
            }
            Op::LayerNormLast { rstd } => {
                if wants(0) {
                    let y = view2(&node.data);
                    let g2 = view2(g);
                    let mut dx = Array2::<f64>::zeros(y.raw_dim());
                    for (i, ((grow, yrow), mut drow)) in g2
                        .rows()
                        .into_iter()
                        .zip(y.rows())
                        .zip(dx.rows_mut())
                        .enumerate()
                    {
                        let d = grow.len() as f64;
                        let gm: f64 = grow.sum() / d;
                        let gym: f64 =
                            grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        let r = rstd[i];
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = r * (gv - gm - yv * gym);
                        }
                    }
                    parents[0].acc_grad_owned(dx.into_dyn());
                }
            }
            Op::LayerNormAffine { rstd, normed } => {
                let g2 = view2(g);
                let gain = parents[1]
                    .0
                    .data
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                if wants(0) {
                    // ghat = g * gain; dx = rstd (ghat - mean(ghat) - normed * mean(ghat*normed))
                    let mut dx = Array2::<f64>::zeros(normed.raw_dim());
                    for (i, ((grow, nrow), mut drow)) in g2
                        .rows()
                        .into_iter()
                        .zip(normed.rows())
                        .zip(dx.rows_mut())
                        .enumerate()
                    {
                        let d = grow.len() as f64;
                        let mut gm = 0.0;
                        let mut gym = 0.0;
                        for j in 0..grow.len() {
                            let gh = grow[j] * gain[j];
                            gm += gh;
                            gym += gh * nrow[j];
                        }
                        gm /= d;
                        gym /= d;
                        let r = rstd[i];
                        for (j, o) in drow.iter_mut().enumerate() {
                            let gh = grow[j] * gain[j];
                            *o = r * (gh - gm - nrow[j] * gym);
                        }
                    }
                    parents[0].acc_grad_owned(dx.into_dyn());
                }
                if wants(1) {
                    parents[1].acc_grad_owned((&g2 * normed).sum_axis(Axis(0)).into_dyn());
                }
                if wants(2) {
                    parents[2].acc_grad_owned(g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Gelu { t } => {
                if wants(0) {
                    let x = &*parents[0].0.data;
                    let dx = ndarray::Zip::from(g).and(x).and(t).map_collect(|&gv, &xv, &tv| {
                        let sech2 = 1.0 - tv * tv;
                        gv * (0.5 * (1.0 + tv)
                            + 0.5 * xv * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv))
                    });
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    let y = &*node.data;
                    let dx = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (1.0 - yv));
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = &*parents[0].0.data;
                    let dx = ndarray::Zip::from(g)
                        .and(x)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Sqrt => {
                if wants(0) {
                    let y = &*node.data;
                    let dx = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * 0.5 / yv);
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Square => {
                if wants(0) {
                    let x = &*parents[0].0.data;
                    let dx = ndarray::Zip::from(g)
                        .and(x)
                        .map_collect(|&gv, &xv| gv * 2.0 * xv);
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Sin => {
                if wants(0) {
                    let x = &*parents[0].0.data;
                    let dx = ndarray::Zip::from(g)
                        .and(x)
                        .map_collect(|&gv, &xv| gv * xv.cos());
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Cos => {
                if wants(0) {
                    let x = &*parents[0].0.data;
                    let dx = ndarray::Zip::from(g)
                        .and(x)
                        .map_collect(|&gv, &xv| -gv * xv.sin());
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::AcosClamped => {
                if wants(0) {
                    let x = &*parents[0].0.data;
                    let dx = ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                        if xv.abs() < 1.0 {
                            -gv / (1.0 - xv * xv).sqrt()
                        } else {
                            0.0
                        }
                    });
                    parents[0].acc_grad_owned(dx);
                }
            }
            Op::Hat => {
                if wants(0) {
                    let dv = ndarray::arr1(&[
                        g[[2, 1]] - g[[1, 2]],
                        g[[0, 2]] - g[[2, 0]],
                        g[[1, 0]] - g[[0, 1]],
                    ]);
                    parents[0].acc_grad_owned(dv.into_dyn());
                }
            }
        }
    }
}
