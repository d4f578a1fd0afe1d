// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Central-difference gradient of a scalar function.
fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(x.raw_dim());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += h;
        xm.as_slice_mut().unwrap()[i] -= h;
        let fp = no_grad(|| f(&Tensor::constant(xp)).item());
        let fm = no_grad(|| f(&Tensor::constant(xm)).item());
        out.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.iter().zip(b.iter()) {
        let scale = 1.0_f64.max(x.abs()).max(y.abs());
        assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
    }
}

fn check_first_order(f: &dyn Fn(&Tensor) -> Tensor, x: ArrayD<f64>) {
    let xt = Tensor::variable(x.clone());
    let y = f(&xt);
    let g = grad(&y, &[&xt], false)[0].clone().expect("gradient exists");
    assert_close(g.value(), &numeric_grad(f, &x, 1e-6), 1e-6);
}

/// Differentiates `v · ∇f(x)` a second time and compares against finite differences.
fn check_second_order(f: &'static dyn Fn(&Tensor) -> Tensor, x: ArrayD<f64>, seed: u64) {
    let v = random(x.shape(), seed);
    let v2 = v.clone();
    let directional = move |t: &Tensor| {
        let t = if t.requires_grad() { t.clone() } else { Tensor::variable(t.value().clone()) };
        let g = with_grad_mode(true, || {
            let y = f(&t);
            grad(&y, &[&t], true)[0].clone().unwrap()
        });
        g.mul(&Tensor::constant(v2.clone())).sum_all()
    };
    let xt = Tensor::variable(x.clone());
    let s = directional(&xt);
    let h2 = grad(&s, &[&xt], false)[0].clone().expect("second derivative exists");
    let numeric = numeric_grad(&directional, &x, 1e-5);
    assert_close(h2.value(), &numeric, 1e-5);
}

#[test]
fn elementwise_ops_first_order() {
    let x = random(&[3, 4], 1);
    let other = Tensor::constant(random(&[1, 4], 2).mapv(|v| v + 2.0));
    check_first_order(&|t| t.mul(t).sum_all(), x.clone());
    check_first_order(&|t| t.sigmoid().sum_all(), x.clone());
    check_first_order(&|t| t.exp().mul_scalar(0.3).sum_all(), x.clone());
    check_first_order(&|t| t.mul(t).add_scalar(1.0).sqrt().sum_all(), x.clone());
    check_first_order(&|t| t.mul(t).add_scalar(1.0).ln().sum_all(), x.clone());
    let o = other.clone();
    check_first_order(&move |t| t.div(&o).sum_all(), x.clone());
    let o = other.clone();
    check_first_order(&move |t| o.div(&t.mul(t).add_scalar(1.0)).sum_all(), x.clone());
    check_first_order(&|t| t.sub(&t.mul_scalar(0.5)).neg().relu().sum_all(), x.clone());
    check_first_order(&|t| t.sum_axes(&[1]).mul(&t.sum_axes(&[1])).sum_all(), x.clone());
    check_first_order(&|t| t.clamp(-0.5, 0.5).mul(t).sum_all(), x.clone());
}

#[test]
fn structural_ops_first_order() {
    let x = random(&[2, 3, 4, 4], 3);
    check_first_order(&|t| t.max_pool2d().mul(&t.max_pool2d()).sum_all(), x.clone());
    check_first_order(&|t| t.max_trailing(2).exp().sum_all(), x.clone());
    check_first_order(&|t| t.reshape(&[6, 16]).t().mul(&t.reshape(&[6, 16]).t()).sum_all(), x.clone());
    let rows = Arc::new(random(&[5, 4], 4).into_dimensionality().unwrap());
    let cols = Arc::new(random(&[7, 4], 5).into_dimensionality().unwrap());
    check_first_order(
        &move |t| {
            let s = t.separable(rows.clone(), cols.clone());
            s.mul(&s).sum_all()
        },
        x.clone(),
    );
    let m = random(&[3, 5], 6);
    check_first_order(
        &|t| {
            let rhs = Tensor::constant(random(&[8, 5], 7));
            let p = t.reshape(&[8, 12]).t().matmul(&rhs);
            p.mul(&p).sum_all()
        },
        x.clone(),
    );
    check_first_order(&|t| t.log_softmax().sum_axes(&[0]).mul(&t.sum_axes(&[0])).sum_all(), m.clone());
    check_first_order(&|t| t.cross_entropy(&[0, 4, 2]), m);
}

#[test]
fn conv_first_order_in_both_arguments() {
    let x = random(&[2, 2, 5, 5], 8);
    let w = random(&[3, 2, 3, 3], 9);
    let wc = Tensor::constant(w.clone());
    check_first_order(&move |t| t.conv2d(&wc, 1).sigmoid().sum_all(), x.clone());
    let xc = Tensor::constant(x);
    check_first_order(&move |t| xc.conv2d(t, 0).mul(&xc.conv2d(t, 0)).sum_all(), w);
}

fn conv_net(t: &Tensor) -> Tensor {
    // Smooth two-conv network of its input, with fixed weights.
    let w1 = Tensor::constant(random(&[3, 2, 3, 3], 10));
    let w2 = Tensor::constant(random(&[2, 3, 3, 3], 11));
    t.conv2d(&w1, 1).sigmoid().conv2d(&w2, 1).sigmoid().mul(t).sum_all()
}

fn conv_net_weights(w: &Tensor) -> Tensor {
    let x = Tensor::constant(random(&[2, 2, 4, 4], 12));
    let h = x.conv2d(w, 1).sigmoid();
    h.mul(&h).conv2d(w, 1).sum_all()
}

#[test]
fn second_order_through_elementwise_and_reductions() {
    check_second_order(&|t| t.mul(t).sigmoid().sum_axes(&[0]).exp().sum_all(), random(&[3, 2], 13), 14);
    check_second_order(&|t| t.div(&t.mul(t).add_scalar(2.0)).mul(t).add_scalar(1.0).sqrt().sum_all(), random(&[4], 15), 16);
    check_second_order(&|t| t.log_softmax().mul(t).sum_all(), random(&[2, 3], 17), 18);
}

#[test]
fn second_order_through_convolutions() {
    check_second_order(&conv_net, random(&[1, 2, 4, 4], 19), 20);
    check_second_order(&conv_net_weights, random(&[2, 2, 3, 3], 21), 22);
}

#[test]
fn second_order_through_resampling_and_pooling() {
    let f: &'static dyn Fn(&Tensor) -> Tensor = &|t: &Tensor| {
        let rows: Array2<f64> = random(&[6, 4], 23).into_dimensionality().unwrap();
        let cols: Array2<f64> = random(&[5, 4], 24).into_dimensionality().unwrap();
        let s = t.separable(Arc::new(rows), Arc::new(cols)).sigmoid();
        let m = s.max_pool2d();
        m.mul(&m).sum_all().add(&s.max_trailing(2).sum_all())
    };
    check_second_order(f, random(&[1, 1, 4, 4], 25), 26);
}

#[test]
fn create_graph_false_returns_constants() {
    let x = Tensor::variable(random(&[3], 27));
    let y = x.mul(&x).sum_all();
    let g = grad(&y, &[&x], false)[0].clone().unwrap();
    assert!(!g.requires_grad());
    let g = grad(&y, &[&x], true)[0].clone().unwrap();
    assert!(g.requires_grad());
}

#[test]
fn unrelated_inputs_get_no_gradient() {
    let x = Tensor::variable(random(&[3], 28));
    let z = Tensor::variable(random(&[3], 29));
    let y = x.mul(&x).sum_all();
    let gs = grad(&y, &[&x, &z], false);
    assert!(gs[0].is_some());
    assert!(gs[1].is_none());
}

#[test]
fn gradient_stops_at_intermediate_input() {
    // Requesting only an intermediate node does not expand its ancestors.
    let x = Tensor::variable(random(&[2, 2], 30));
    let a = x.exp();
    let y = a.mul(&a).sum_all();
    let ga = grad(&y, &[&a], false)[0].clone().unwrap();
    assert_close(ga.value(), &a.value().mapv(|v| 2.0 * v), 1e-12);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::variable(random(&[2], 31));
    let y = no_grad(|| x.mul(&x));
    assert!(!y.requires_grad());
    assert!(is_grad_enabled());
}
