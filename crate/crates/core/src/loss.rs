// SPDX-License-Identifier: Apache-2.0

//! Region-of-interest activation loss.
//!
//! `L_RIA = 1 − ÎoU + λ·diag(B_gc)/norm`, where `ÎoU = |B_od ∩ B_gc| / |B_gc|`
//! measures how much of the attention box lies inside the detector box.
//! The total objective is `α·L_CE + β·L_RIA`.
//!
//! The hard form works on integer pixel boxes and is used for evaluation.
//! The soft form replaces the attention box by a sigmoid soft mask so that
//! gradients reach the heatmap, and through it the network.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiaError};
use crate::saliency::{self, BBox, DEFAULT_KAPPA, DEFAULT_TAU, DEFAULT_THRESHOLD, MIN_SOFT_MASS};
use crate::tensor::Tensor;

/// Keeps `sqrt` differentiable at zero spread.
const SQRT_EPS: f64 = 1e-9;

fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    0.1
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Length that diagonals are divided by; the image diagonal when unset.
    #[serde(default)]
    pub diag_normalizer: Option<f64>,
    /// Cap on samples per batch that receive the RIA term; 0 means all.
    #[serde(default)]
    pub ria_samples_per_batch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            lambda: default_lambda(),
            threshold: default_threshold(),
            tau: default_tau(),
            kappa: default_kappa(),
            diag_normalizer: None,
            ria_samples_per_batch: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RiaError::Config(m));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!("alpha ({}) and beta ({}) must be non-negative", self.alpha, self.beta));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda ({}) must be non-negative", self.lambda));
        }
        saliency::check_threshold(self.threshold)?;
        if !(self.tau > 0.0) || !(self.kappa > 0.0) {
            return bad(format!("tau ({}) and kappa ({}) must be positive", self.tau, self.kappa));
        }
        if let Some(n) = self.diag_normalizer {
            if !(n > 0.0) {
                return bad(format!("diag_normalizer ({n}) must be positive"));
            }
        }
        Ok(())
    }

    /// Diagonal normalizer for an image of the given size.
    pub fn normalizer(&self, width: usize, height: usize) -> f64 {
        self.diag_normalizer
            .unwrap_or_else(|| ((width * width + height * height) as f64).sqrt())
    }
}

/// Intersection over union on inclusive pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// `|B_od ∩ B_gc| / |B_gc|`; equals 1 exactly when `b_gc ⊆ b_od`.
pub fn iou_hat(b_od: &BBox, b_gc: &BBox) -> f64 {
    let inter = b_od.intersection(b_gc).map_or(0, |i| i.area());
    inter as f64 / b_gc.area() as f64
}

/// `λ · sqrt(w² + h²) / normalizer`, with `w`, `h` the corner-to-corner spans.
pub fn diag_penalty(b_gc: &BBox, cfg: &LossConfig, image_size: (usize, usize)) -> f64 {
    let w = (b_gc.x_max - b_gc.x_min) as f64;
    let h = (b_gc.y_max - b_gc.y_min) as f64;
    cfg.lambda * (w * w + h * h).sqrt() / cfg.normalizer(image_size.0, image_size.1)
}

/// `1 − ÎoU + diag_penalty` on pixel boxes.
pub fn ria_hard(b_od: &BBox, b_gc: &BBox, cfg: &LossConfig, image_size: (usize, usize)) -> f64 {
    1.0 - iou_hat(b_od, b_gc) + diag_penalty(b_gc, cfg, image_size)
}

/// Soft RIA for a batch of heatmaps.
pub struct SoftRia {
    /// Per-sample loss `(N,)`; entries of skipped samples are meaningless.
    pub per_sample: Tensor,
    /// Mean over non-skipped samples (a constant zero when all are skipped).
    pub batch_mean: Tensor,
    pub soft_iou: Vec<f64>,
    /// `λ·diag/norm` per sample.
    pub diag: Vec<f64>,
    pub skipped: Vec<bool>,
}

impl SoftRia {
    pub fn active_count(&self) -> usize {
        self.skipped.iter().filter(|s| !**s).count()
    }
}

/// Per-sample soft terms: `(loss (N,), soft ÎoU (N,), λ·diag/norm (N,), mass (N,1,1,1))`.
fn soft_terms(heatmaps: &Tensor, boxes: &[Option<BBox>], cfg: &LossConfig) -> (Tensor, Tensor, Tensor, Tensor) {
    let shape = heatmaps.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);

    let mask = heatmaps.add_scalar(-cfg.threshold).mul_scalar(1.0 / cfg.tau).sigmoid();
    let mass = mask.sum_axes(&[2, 3]);

    let mut inside = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    for (i, b) in boxes.iter().enumerate() {
        if let Some(b) = b {
            for y in b.y_min..=b.y_max.min(h - 1) {
                for x in b.x_min..=b.x_max.min(w - 1) {
                    inside[[i, 0, y, x]] = 1.0;
                }
            }
        }
    }
    let soft_iou = mask.mask(inside).sum_axes(&[2, 3]).div(&mass);

    let xs = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[1, 1, 1, w]), |i| i[3] as f64));
    let ys = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[1, 1, h, 1]), |i| i[2] as f64));
    let spread = |coords: &Tensor, limit: usize| {
        let mu = mask.mul(coords).sum_axes(&[2, 3]).div(&mass);
        let dev = coords.sub(&mu);
        let var = mask.mul(&dev).mul(&dev).sum_axes(&[2, 3]).div(&mass);
        let sigma = var.add_scalar(SQRT_EPS).sqrt().mul_scalar(cfg.kappa);
        let hi = (limit - 1) as f64;
        mu.add(&sigma).clamp(0.0, hi).sub(&mu.sub(&sigma).clamp(0.0, hi))
    };
    let width = spread(&xs, w);
    let height = spread(&ys, h);
    let diag = width
        .mul(&width)
        .add(&height.mul(&height))
        .add_scalar(SQRT_EPS)
        .sqrt()
        .mul_scalar(cfg.lambda / cfg.normalizer(w, h));

    let loss = soft_iou.neg().add_scalar(1.0).add(&diag).reshape(&[n]);
    (loss, soft_iou.reshape(&[n]), diag.reshape(&[n]), mass)
}

/// Differentiable RIA for heatmaps `(N, 1, H, W)` in `[0, 1]`.
///
/// A sample is skipped when it has no detector box, its heatmap peak is
/// zero, or its soft mask mass falls below [`MIN_SOFT_MASS`]. `peaks` are the
/// pre-normalization maxima; pass `None` to skip only on mass. Skipped
/// samples are left out of the graph that `batch_mean` is built from, so
/// they cannot leak non-finite gradients.
pub fn ria_soft_batch(
    heatmaps: &Tensor,
    peaks: Option<&[f64]>,
    boxes: &[Option<BBox>],
    cfg: &LossConfig,
) -> SoftRia {
    let shape = heatmaps.shape().to_vec();
    assert_eq!(shape.len(), 4, "heatmaps must be (N, 1, H, W)");
    assert_eq!(shape[1], 1);
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(boxes.len(), n);

    let (per_sample, soft_iou, diag, mass) = soft_terms(heatmaps, boxes, cfg);

    let masses: Vec<f64> = mass.value().iter().copied().collect();
    let mut skipped: Vec<bool> = (0..n)
        .map(|i| {
            boxes[i].is_none()
                || peaks.is_some_and(|p| !(p[i] > 0.0))
                || !(masses[i] >= MIN_SOFT_MASS)
                || !per_sample.value()[i].is_finite()
        })
        .collect();
    if cfg.ria_samples_per_batch > 0 {
        let mut kept = 0;
        for s in skipped.iter_mut().filter(|s| !**s) {
            if kept >= cfg.ria_samples_per_batch {
                *s = true;
            } else {
                kept += 1;
            }
        }
    }
    let active: Vec<usize> = (0..n).filter(|&i| !skipped[i]).collect();
    let batch_mean = if active.is_empty() {
        Tensor::scalar(0.0)
    } else if active.len() == n {
        per_sample.mean_all()
    } else {
        let plane = h * w;
        let index: Vec<usize> = active
            .iter()
            .flat_map(|&i| i * plane..(i + 1) * plane)
            .collect();
        let sub = heatmaps.gather(Arc::new(index), &[active.len(), 1, h, w]);
        let sub_boxes: Vec<Option<BBox>> = active.iter().map(|&i| boxes[i]).collect();
        soft_terms(&sub, &sub_boxes, cfg).0.mean_all()
    };

    SoftRia {
        soft_iou: soft_iou.value().iter().copied().collect(),
        diag: diag.value().iter().copied().collect(),
        per_sample,
        batch_mean,
        skipped,
    }
}

/// Soft RIA for a single `(H, W)` heatmap; `None` when degenerate.
pub fn ria_soft(heatmap: &Tensor, b_od: &BBox, cfg: &LossConfig) -> Option<Tensor> {
    assert_eq!(heatmap.ndim(), 2);
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let peak = heatmap.value().iter().copied().fold(0.0_f64, f64::max);
    let batch = heatmap.reshape(&[1, 1, h, w]);
    let r = ria_soft_batch(&batch, Some(&[peak]), &[Some(*b_od)], cfg);
    (!r.skipped[0]).then(|| r.per_sample.reshape(&[]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub ria: f64,
    pub iou_hat: f64,
    pub diag_penalty: f64,
    pub skipped_ria: Vec<bool>,
}

impl LossBreakdown {
    pub fn skip_rate(&self) -> f64 {
        if self.skipped_ria.is_empty() {
            return 0.0;
        }
        self.skipped_ria.iter().filter(|s| **s).count() as f64 / self.skipped_ria.len() as f64
    }
}

/// `α·ce + β·ria`.
pub fn total_loss(ce: f64, ria: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        total: cfg.alpha * ce + cfg.beta * ria,
        ce,
        ria,
        iou_hat: 0.0,
        diag_penalty: 0.0,
        skipped_ria: Vec::new(),
    }
}

/// Combines a batch's cross-entropy with per-sample RIA values; skipped
/// samples contribute nothing and the RIA term is their mean over the rest.
pub fn total_loss_batch(ce: f64, ria_per_sample: &[f64], skipped: &[bool], cfg: &LossConfig) -> LossBreakdown {
    let active: Vec<f64> = ria_per_sample
        .iter()
        .zip(skipped)
        .filter(|(_, s)| !**s)
        .map(|(r, _)| *r)
        .collect();
    let ria = if active.is_empty() {
        0.0
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    };
    let mut b = total_loss(ce, ria, cfg);
    b.skipped_ria = skipped.to_vec();
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_basics() {
        let a = bx(0, 0, 1, 1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5, 5, 6, 6)), 0.0);
        assert!((iou(&a, &bx(1, 1, 2, 2)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_hat_basics() {
        assert_eq!(iou_hat(&bx(0, 0, 9, 9), &bx(2, 2, 4, 4)), 1.0);
        assert_eq!(iou_hat(&bx(0, 0, 1, 1), &bx(3, 3, 4, 4)), 0.0);
        // 4-pixel attention box, 2 of its pixels inside.
        assert_eq!(iou_hat(&bx(0, 0, 1, 5), &bx(1, 0, 2, 1)), 0.5);
    }

    #[test]
    fn diag_penalty_examples() {
        let cfg = LossConfig {
            diag_normalizer: Some(1.0),
            ..Default::default()
        };
        assert!((diag_penalty(&bx(0, 0, 3, 4), &cfg, (64, 64)) - 0.5).abs() < 1e-12);
        assert_eq!(diag_penalty(&bx(2, 2, 2, 2), &cfg, (64, 64)), 0.0);
        let zero = LossConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        assert_eq!(diag_penalty(&bx(0, 0, 30, 40), &zero, (64, 64)), 0.0);
    }

    #[test]
    fn default_normalizer_is_image_diagonal() {
        let cfg = LossConfig::default();
        assert!((cfg.normalizer(3, 4) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ria_hard_examples() {
        let mut cfg = LossConfig {
            lambda: 0.0,
            diag_normalizer: Some(1.0),
            ..Default::default()
        };
        assert_eq!(ria_hard(&bx(0, 0, 9, 9), &bx(1, 1, 4, 5), &cfg, (10, 10)), 0.0);
        assert_eq!(ria_hard(&bx(0, 0, 1, 1), &bx(5, 5, 6, 6), &cfg, (10, 10)), 1.0);
        cfg.lambda = 0.1;
        assert!((ria_hard(&bx(0, 0, 9, 9), &bx(1, 1, 4, 5), &cfg, (10, 10)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert!((total_loss(0.8, 0.4, &cfg).total - 1.0).abs() < 1e-12);
        let base = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(0.8, 0.4, &base).total, 0.8);
        let all_skipped = total_loss_batch(0.8, &[0.3, 0.9], &[true, true], &cfg);
        assert_eq!(all_skipped.total, 0.8);
        assert_eq!(all_skipped.skip_rate(), 1.0);
        let half = total_loss_batch(0.8, &[0.2, 0.9], &[false, true], &cfg);
        assert!((half.ria - 0.2).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for cfg in [
            LossConfig { beta: -1.0, ..Default::default() },
            LossConfig { threshold: 1.0, ..Default::default() },
            LossConfig { tau: 0.0, ..Default::default() },
            LossConfig { diag_normalizer: Some(0.0), ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!(LossConfig::default().validate().is_ok());
    }

    fn blob(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[h, w]), |i| {
            if i[0] >= y0 && i[0] <= y1 && i[1] >= x0 && i[1] <= x1 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn soft_ria_inside_and_outside() {
        let cfg = LossConfig {
            lambda: 0.0,
            tau: 0.02,
            ..Default::default()
        };
        let hm = Tensor::constant(blob(32, 32, 4, 11, 4, 11));
        let inside = ria_soft(&hm, &bx(2, 2, 14, 14), &cfg).unwrap().item();
        assert!(inside < 0.01, "{inside}");
        let outside = ria_soft(&hm, &bx(18, 18, 30, 30), &cfg).unwrap().item();
        assert!(outside > 0.99, "{outside}");
    }

    #[test]
    fn soft_ria_skips_degenerate() {
        let cfg = LossConfig::default();
        let hm = Tensor::constant(ArrayD::zeros(IxDyn(&[8, 8])));
        assert!(ria_soft(&hm, &bx(0, 0, 3, 3), &cfg).is_none());
        let batch = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 1, 8, 8]), 0.7));
        let r = ria_soft_batch(&batch, None, &[None, Some(bx(0, 0, 3, 3))], &cfg);
        assert_eq!(r.skipped, vec![true, false]);
        assert_eq!(r.active_count(), 1);
    }

    #[test]
    fn sample_cap_limits_active_samples() {
        let cfg = LossConfig {
            ria_samples_per_batch: 1,
            ..Default::default()
        };
        let batch = Tensor::constant(ArrayD::from_elem(IxDyn(&[3, 1, 8, 8]), 0.7));
        let b = Some(bx(0, 0, 3, 3));
        let r = ria_soft_batch(&batch, None, &[b, b, b], &cfg);
        assert_eq!(r.skipped, vec![false, true, true]);
    }

    #[test]
    fn soft_ria_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let base = ArrayD::from_shape_fn(IxDyn(&[6, 7]), |i| {
            let (y, x) = (i[0] as f64, i[1] as f64);
            (-((y - 2.0).powi(2) + (x - 3.5).powi(2)) / 6.0).exp()
        });
        let b = bx(1, 0, 4, 3);
        let x = Tensor::variable(base.clone());
        let loss = ria_soft(&x, &b, &cfg).unwrap();
        let g = tensor::grad(&loss, &[&x], false)[0].clone().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fp = ria_soft(&Tensor::constant(p), &b, &cfg).unwrap().item();
            let fm = ria_soft(&Tensor::constant(m), &b, &cfg).unwrap().item();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.value().as_slice().unwrap()[i];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn soft_mean_handles_nan_in_skipped_samples() {
        let cfg = LossConfig::default();
        let mut v = ArrayD::from_elem(IxDyn(&[2, 1, 4, 4]), 0.9);
        v[[0, 0, 0, 0]] = f64::NAN;
        let r = ria_soft_batch(&Tensor::constant(v), Some(&[0.0, 1.0]), &[Some(bx(0, 0, 1, 1)); 2], &cfg);
        assert_eq!(r.skipped, vec![true, false]);
        assert!(r.batch_mean.item().is_finite());
    }
}
