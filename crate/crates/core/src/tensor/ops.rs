// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

use super::conv;
use super::Tensor;

pub(super) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Sigmoid(Tensor),
    /// Elementwise product with a fixed array; also the backward of ReLU and clamp.
    Mask(Tensor, Arc<ArrayD<f64>>),
    SumAxes(Tensor),
    BroadcastTo(Tensor),
    Reshape(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Gather(Tensor, Arc<Vec<usize>>),
    Scatter(Tensor, Arc<Vec<usize>>),
    Separable(Tensor, Arc<Array2<f64>>, Arc<Array2<f64>>),
    Conv2d(Tensor, Tensor, usize),
    ConvInputGrad(Tensor, Tensor, usize),
    ConvWeightGrad(Tensor, Tensor, usize),
}

impl Op {
    pub(super) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Conv2d(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Neg(a) | AddScalar(a) | MulScalar(a, _) | Exp(a) | Log(a) | Sqrt(a) | Sigmoid(a) => {
                vec![a]
            }
            Mask(a, _) | SumAxes(a) | BroadcastTo(a) | Reshape(a) | Transpose(a) => vec![a],
            Gather(a, _) | Scatter(a, _) | Separable(a, _, _) => vec![a],
        }
    }

    /// Gradients for each parent given the upstream gradient `g` of `out`.
    pub(super) fn backward(&self, out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        use Op::*;
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Add(a, b) => vec![
                want(0).then(|| g.sum_to(a.shape())),
                want(1).then(|| g.sum_to(b.shape())),
            ],
            Sub(a, b) => vec![
                want(0).then(|| g.sum_to(a.shape())),
                want(1).then(|| g.neg().sum_to(b.shape())),
            ],
            Mul(a, b) => vec![
                want(0).then(|| g.mul(b).sum_to(a.shape())),
                want(1).then(|| g.mul(a).sum_to(b.shape())),
            ],
            Div(a, b) => vec![
                want(0).then(|| g.div(b).sum_to(a.shape())),
                want(1).then(|| g.mul(out).div(b).neg().sum_to(b.shape())),
            ],
            Neg(_) => vec![Some(g.neg())],
            AddScalar(_) => vec![Some(g.clone())],
            MulScalar(_, s) => vec![Some(g.mul_scalar(*s))],
            Exp(_) => vec![Some(g.mul(out))],
            Log(a) => vec![Some(g.div(a))],
            Sqrt(_) => vec![Some(g.div(out).mul_scalar(0.5))],
            Sigmoid(_) => {
                let one_minus = out.neg().add_scalar(1.0);
                vec![Some(g.mul(out).mul(&one_minus))]
            }
            Mask(_, m) => vec![Some(g.mask_arc(m.clone()))],
            SumAxes(a) => vec![Some(g.broadcast_to(a.shape()))],
            BroadcastTo(a) => vec![Some(g.sum_to(a.shape()))],
            Reshape(a) => vec![Some(g.reshape(a.shape()))],
            MatMul(a, b) => vec![
                want(0).then(|| g.matmul(&b.t())),
                want(1).then(|| a.t().matmul(g)),
            ],
            Transpose(_) => vec![Some(g.t())],
            Gather(a, idx) => vec![Some(g.scatter(idx.clone(), a.shape()))],
            Scatter(a, idx) => vec![Some(g.gather(idx.clone(), a.shape()))],
            Separable(_, rows, cols) => {
                let rt = Arc::new(rows.t().to_owned());
                let ct = Arc::new(cols.t().to_owned());
                vec![Some(g.separable(rt, ct))]
            }
            Conv2d(x, w, pad) => vec![
                want(0).then(|| g.conv2d_input_grad(w, *pad, x.shape())),
                want(1).then(|| x.conv2d_weight_grad(g, *pad, w.shape())),
            ],
            ConvInputGrad(g0, w, pad) => vec![
                want(0).then(|| g.conv2d(w, *pad)),
                want(1).then(|| g.conv2d_weight_grad(g0, *pad, w.shape())),
            ],
            ConvWeightGrad(x, g0, pad) => vec![
                want(0).then(|| g0.conv2d_input_grad(g, *pad, x.shape())),
                want(1).then(|| x.conv2d(g, *pad)),
            ],
        }
    }
}

fn check_broadcastable(a: &[usize], b: &[usize]) {
    assert_eq!(a.len(), b.len(), "rank mismatch {a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!(x == y || *x == 1 || *y == 1, "shapes {a:?} and {b:?} do not broadcast");
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        check_broadcastable(self.shape(), other.shape());
        Tensor::from_op(self.value() + other.value(), Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        check_broadcastable(self.shape(), other.shape());
        Tensor::from_op(self.value() - other.value(), Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        check_broadcastable(self.shape(), other.shape());
        Tensor::from_op(self.value() * other.value(), Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        check_broadcastable(self.shape(), other.shape());
        Tensor::from_op(self.value() / other.value(), Op::Div(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(|v| -v), Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(self.value().mapv(|v| v + s), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(self.value().mapv(|v| v * s), Op::MulScalar(self.clone(), s))
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::ln), Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Tensor::from_op(v, Op::Sigmoid(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let step = Arc::new(self.value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        let v = self.value().mapv(|v| v.max(0.0));
        Tensor::from_op(v, Op::Mask(self.clone(), step))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let inside = Arc::new(self.value().mapv(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 }));
        let v = self.value().mapv(|v| v.clamp(lo, hi));
        Tensor::from_op(v, Op::Mask(self.clone(), inside))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mask(&self, m: ArrayD<f64>) -> Tensor {
        self.mask_arc(Arc::new(m))
    }

    fn mask_arc(&self, m: Arc<ArrayD<f64>>) -> Tensor {
        assert_eq!(self.shape(), m.shape());
        let v = self.value() * &*m;
        Tensor::from_op(v, Op::Mask(self.clone(), m))
    }

    /// Sums over `axes`, keeping them as length-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let mut v = self.value().clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in &sorted {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        Tensor::from_op(v, Op::SumAxes(self.clone()))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    /// Sum of all elements as a 0-dimensional tensor.
    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.sum_axes(&axes).reshape(&[])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value().len().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        check_broadcastable(self.shape(), shape);
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", self.shape()))
            .to_owned();
        Tensor::from_op(v, Op::BroadcastTo(self.clone()))
    }

    /// Sums broadcast dimensions back down to `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert_eq!(self.ndim(), shape.len(), "sum_to rank mismatch");
        let axes: Vec<usize> = (0..shape.len())
            .filter(|&i| shape[i] == 1 && self.shape()[i] != 1)
            .collect();
        self.sum_axes(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} into {shape:?}", self.shape()));
        Tensor::from_op(v, Op::Reshape(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        let v = a.dot(&b).into_dyn();
        Tensor::from_op(v, Op::MatMul(self.clone(), other.clone()))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "t() needs a 2-D tensor");
        let v = self.value().t().as_standard_layout().into_owned();
        Tensor::from_op(v, Op::Transpose(self.clone()))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `out_shape`.
    pub fn gather(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), out_shape.iter().product::<usize>());
        let src = self.value().as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let v = ArrayD::from_shape_vec(IxDyn(out_shape), data).expect("gather shape");
        Tensor::from_op(v, Op::Gather(self.clone(), index))
    }

    /// `out.flat[index[i]] += self.flat[i]` into zeros of `out_shape`.
    pub fn scatter(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), self.value().len());
        let mut data = vec![0.0; out_shape.iter().product()];
        let src = self.value().as_standard_layout();
        for (&i, &v) in index.iter().zip(src.iter()) {
            data[i] += v;
        }
        let v = ArrayD::from_shape_vec(IxDyn(out_shape), data).expect("scatter shape");
        Tensor::from_op(v, Op::Scatter(self.clone(), index))
    }

    /// Selects `self[i, index[i]]` from a 2-D tensor, giving a 1-D tensor.
    pub fn select_per_row(&self, index: &[usize]) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        assert_eq!(index.len(), rows);
        let flat: Vec<usize> = index
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "column {c} out of range {cols}");
                r * cols + c
            })
            .collect();
        self.gather(Arc::new(flat), &[rows])
    }

    /// Maximum over the last `n` axes, keeping them as length-1 dimensions.
    /// The gradient goes to the first maximal element.
    pub fn max_trailing(&self, n: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(n >= 1 && n <= shape.len());
        let inner: usize = shape[shape.len() - n..].iter().product();
        let outer: usize = shape[..shape.len() - n].iter().product();
        let src = self.value().as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut index = Vec::with_capacity(outer);
        for o in 0..outer {
            let row = &src[o * inner..(o + 1) * inner];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            index.push(o * inner + best);
        }
        let mut out_shape = shape.clone();
        for d in out_shape.iter_mut().rev().take(n) {
            *d = 1;
        }
        self.gather(Arc::new(index), &out_shape)
    }

    /// 2x2, stride-2 max pooling over an `(N, C, H, W)` tensor.
    pub fn max_pool2d(&self) -> Tensor {
        assert_eq!(self.ndim(), 4);
        let s = self.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value().as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(Arc::new(index), &[n, c, oh, ow])
    }

    /// Applies `rows · X · colsᵀ` to every trailing 2-D slice `X`.
    pub fn separable(&self, rows: Arc<Array2<f64>>, cols: Arc<Array2<f64>>) -> Tensor {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 2);
        let (hi, wi) = (shape[nd - 2], shape[nd - 1]);
        assert_eq!(rows.ncols(), hi);
        assert_eq!(cols.ncols(), wi);
        let (ho, wo) = (rows.nrows(), cols.nrows());
        let outer: usize = shape[..nd - 2].iter().product();
        let src = self.value().as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(outer * ho * wo);
        for o in 0..outer {
            let x = ndarray::ArrayView2::from_shape((hi, wi), &src[o * hi * wi..(o + 1) * hi * wi])
                .expect("slice shape");
            let y = rows.dot(&x).dot(&cols.t());
            out.extend(y.iter().copied());
        }
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        let v = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("separable shape");
        Tensor::from_op(v, Op::Separable(self.clone(), rows, cols))
    }

    /// Stride-1 2-D convolution (cross-correlation) with zero padding `pad`.
    /// `self` is `(N, C, H, W)`, `weight` is `(O, C, k, k)`.
    pub fn conv2d(&self, weight: &Tensor, pad: usize) -> Tensor {
        let v = conv::conv2d_forward(self.value(), weight.value(), pad);
        Tensor::from_op(v, Op::Conv2d(self.clone(), weight.clone(), pad))
    }

    fn conv2d_input_grad(&self, weight: &Tensor, pad: usize, input_shape: &[usize]) -> Tensor {
        let v = conv::conv2d_input_grad(self.value(), weight.value(), pad, input_shape);
        Tensor::from_op(v, Op::ConvInputGrad(self.clone(), weight.clone(), pad))
    }

    fn conv2d_weight_grad(&self, grad_out: &Tensor, pad: usize, weight_shape: &[usize]) -> Tensor {
        let v = conv::conv2d_weight_grad(self.value(), grad_out.value(), pad, weight_shape);
        Tensor::from_op(v, Op::ConvWeightGrad(self.clone(), grad_out.clone(), pad))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&self) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let mut shift = self.value().clone();
        for mut row in shift.axis_iter_mut(Axis(0)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.fill(m);
        }
        let shifted = self.sub(&Tensor::constant(shift));
        let lse = shifted.exp().sum_axes(&[1]).ln();
        shifted.sub(&lse)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `self`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Tensor {
        self.log_softmax().select_per_row(labels).mean_all().neg()
    }
}
