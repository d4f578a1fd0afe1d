// SPDX-License-Identifier: Apache-2.0

//! Stride-1 convolution kernels via im2col and dense matrix products.
//!
//! The three kernels (forward, input gradient, weight gradient) are closed
//! under differentiation, which is what makes higher-order gradients of
//! convolutional networks expressible.

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

fn dims4(a: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(a.len(), 4, "expected a 4-D shape, got {a:?}");
    (a[0], a[1], a[2], a[3])
}

fn out_size(n: usize, k: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel {k} larger than padded input {n}+2*{pad}");
    n + 2 * pad - k + 1
}

/// Unfolds one `(C, H, W)` image into a `(C*k*k, Ho*Wo)` column matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array2<f64> {
    let (oh, ow) = (out_size(h, k, pad), out_size(w, k, pad));
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    // ix = ox + kj - pad must lie in [0, w)
                    let lo = pad.saturating_sub(kj);
                    let hi = (w + pad).saturating_sub(kj).min(ow);
                    for ox in lo..hi {
                        dst_row[ox] = src_row[ox + kj - pad];
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, oh * ow), cols).expect("im2col shape")
}

/// Adjoint of `im2col`: folds columns back into a `(C, H, W)` buffer.
fn col2im(cols: ArrayView2<f64>, out: &mut [f64], c: usize, h: usize, w: usize, k: usize, pad: usize) {
    let (oh, ow) = (out_size(h, k, pad), out_size(w, k, pad));
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    let lo = pad.saturating_sub(kj);
                    let hi = (w + pad).saturating_sub(kj).min(ow);
                    for ox in lo..hi {
                        dst_row[ox + kj - pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

fn weight_matrix(weight: &ArrayD<f64>) -> (Array2<f64>, usize) {
    let (o, c, k, k2) = dims4(weight.shape());
    assert_eq!(k, k2, "only square kernels are supported");
    let m = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, c * k * k))
        .expect("weight reshape");
    (m, k)
}

pub fn conv2d_forward(x: &ArrayD<f64>, weight: &ArrayD<f64>, pad: usize) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x.shape());
    let (wm, k) = weight_matrix(weight);
    let o = wm.nrows();
    assert_eq!(wm.ncols(), c * k * k, "channel mismatch between input and weight");
    let (oh, ow) = (out_size(h, k, pad), out_size(w, k, pad));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for i in 0..n {
        let cols = im2col(&xs[i * c * h * w..(i + 1) * c * h * w], c, h, w, k, pad);
        let y = wm.dot(&cols);
        out.extend(y.iter().copied());
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, oh, ow]), out).expect("conv output shape")
}

/// Gradient of `<g, conv(x, w)>` with respect to `x`.
pub fn conv2d_input_grad(
    grad_out: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    pad: usize,
    input_shape: &[usize],
) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(input_shape);
    let (wm, k) = weight_matrix(weight);
    let (gn, o, oh, ow) = dims4(grad_out.shape());
    assert_eq!(gn, n);
    assert_eq!(wm.nrows(), o);
    assert_eq!((oh, ow), (out_size(h, k, pad), out_size(w, k, pad)));
    let gs = grad_out.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let wt = wm.t();
    let mut out = vec![0.0; n * c * h * w];
    for i in 0..n {
        let g = ArrayView2::from_shape((o, oh * ow), &gs[i * o * oh * ow..(i + 1) * o * oh * ow])
            .expect("grad slab");
        let cols = wt.dot(&g);
        col2im(cols.view(), &mut out[i * c * h * w..(i + 1) * c * h * w], c, h, w, k, pad);
    }
    ArrayD::from_shape_vec(IxDyn(input_shape), out).expect("input grad shape")
}

/// Gradient of `<g, conv(x, w)>` with respect to `w`.
pub fn conv2d_weight_grad(
    x: &ArrayD<f64>,
    grad_out: &ArrayD<f64>,
    pad: usize,
    weight_shape: &[usize],
) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x.shape());
    let (o, wc, k, _) = dims4(weight_shape);
    assert_eq!(wc, c);
    let (gn, go, oh, ow) = dims4(grad_out.shape());
    assert_eq!((gn, go), (n, o));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let gs = grad_out.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let mut acc = Array2::<f64>::zeros((o, c * k * k));
    for i in 0..n {
        let cols = im2col(&xs[i * c * h * w..(i + 1) * c * h * w], c, h, w, k, pad);
        let g = ArrayView2::from_shape((o, oh * ow), &gs[i * o * oh * ow..(i + 1) * o * oh * ow])
            .expect("grad slab");
        ndarray::linalg::general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut acc);
    }
    acc.into_shape_with_order(IxDyn(weight_shape)).expect("weight grad shape")
}
