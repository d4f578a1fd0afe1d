// SPDX-License-Identifier: Apache-2.0

//! Grad-CAM heatmaps: channel weights from spatially averaged gradients,
//! a rectified weighted sum of activation maps, bilinear upsampling to the
//! input resolution and max-normalization to `[0, 1]`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ensure_parent;
use crate::error::{Result, RiaError};
use crate::model::{CapturedActivations, ClassifierModel};
use crate::tensor::Tensor;

/// Added to the maximum before dividing, so flat maps stay finite.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Per-sample channel importance weights, shape `(N, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub alpha: Array2<f64>,
}

/// A normalized saliency map aligned with the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `(H, W)` values in `[0, 1]`.
    pub values: Array2<f64>,
    pub class_index: usize,
    /// Resolution of the capture layer before upsampling.
    pub source_size: (usize, usize),
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// `(row, col)` of the first maximal entry.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for ((y, x), &v) in self.values.indexed_iter() {
            if v > self.values[best] {
                best = (y, x);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassChoice {
    Top1,
    Class(usize),
}

/// `alpha[n, k]` = mean over spatial positions of the captured gradients.
pub fn channel_weights(captured: &CapturedActivations) -> Result<ChannelWeights> {
    let g = captured
        .gradients
        .as_ref()
        .ok_or_else(|| RiaError::Input("captured gradients are missing; run backward_capture first".into()))?;
    let alpha = g
        .mean_axis(Axis(3))
        .and_then(|m| m.mean_axis(Axis(2)))
        .ok_or_else(|| RiaError::Input("empty spatial grid".into()))?;
    Ok(ChannelWeights { alpha })
}

/// `ReLU(Σ_k alpha_k · A^k)` for one sample; `activations` is `(K, H', W')`.
pub fn raw_heatmap_single(activations: ArrayView3<f64>, alpha: &[f64]) -> Array2<f64> {
    assert_eq!(activations.len_of(Axis(0)), alpha.len(), "one weight per channel");
    let (_, h, w) = activations.dim();
    let mut out = Array2::zeros((h, w));
    for (a_k, &wk) in activations.outer_iter().zip(alpha) {
        out.scaled_add(wk, &a_k);
    }
    out.mapv_inplace(|v| v.max(0.0));
    out
}

/// Raw (pre-upsampling) heatmaps for the whole batch, shape `(N, H', W')`.
pub fn raw_heatmap(captured: &CapturedActivations, weights: &ChannelWeights) -> Result<Array3<f64>> {
    let (n, k, h, w) = captured.activations.dim();
    if weights.alpha.dim() != (n, k) {
        return Err(RiaError::Input(format!(
            "channel weights {:?} do not match activations ({n}, {k})",
            weights.alpha.dim()
        )));
    }
    let mut out = Array3::zeros((n, h, w));
    for i in 0..n {
        let alpha = weights.alpha.row(i).to_vec();
        out.slice_mut(s![i, .., ..])
            .assign(&raw_heatmap_single(captured.activations.slice(s![i, .., .., ..]), &alpha));
    }
    Ok(out)
}

/// Interpolation matrix `(out, in)` for 1-D linear resampling with half-pixel
/// centers: output sample `i` reads input coordinate `(i + 0.5)·in/out − 0.5`,
/// clamped to the valid range.
pub fn bilinear_matrix(input: usize, output: usize) -> Array2<f64> {
    assert!(input > 0 && output > 0);
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Bilinear resize to `target = (H, W)` followed by division by `max + ε`.
pub fn upsample_normalize(raw: ArrayView2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(RiaError::Input(format!("target size {th}x{tw} is smaller than 1x1")));
    }
    if raw.is_empty() {
        return Err(RiaError::Input("empty raw heatmap".into()));
    }
    let rows = bilinear_matrix(raw.nrows(), th);
    let cols = bilinear_matrix(raw.ncols(), tw);
    let mut up = rows.dot(&raw).dot(&cols.t());
    let max = up.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        up.fill(0.0);
    } else {
        up.mapv_inplace(|v| v / (max + NORMALIZE_EPS));
    }
    Ok(up)
}

/// Grad-CAM for a batch of images `(N, C, H, W)`; `classes = None` explains
/// the top-1 prediction of each sample.
pub fn gradcam_batch(
    model: &ClassifierModel,
    images: &Array4<f64>,
    classes: Option<&[usize]>,
) -> Result<Vec<Heatmap>> {
    Ok(gradcam_with_logits(model, images, classes)?.1)
}

/// Like [`gradcam_batch`], also returning the logits of the same forward pass.
pub fn gradcam_with_logits(
    model: &ClassifierModel,
    images: &Array4<f64>,
    classes: Option<&[usize]>,
) -> Result<(Array2<f64>, Vec<Heatmap>)> {
    let mut pass = model.forward_with_capture(images)?;
    let chosen = match classes {
        Some(c) => c.to_vec(),
        None => pass.top1(),
    };
    model.backward_capture(&mut pass, &chosen)?;
    let weights = channel_weights(&pass.captured)?;
    let raw = raw_heatmap(&pass.captured, &weights)?;
    let target = (images.dim().2, images.dim().3);
    let source_size = (raw.dim().1, raw.dim().2);
    let maps = raw
        .outer_iter()
        .zip(chosen)
        .map(|(r, class_index)| {
            Ok(Heatmap {
                values: upsample_normalize(r, target)?,
                class_index,
                source_size,
            })
        })
        .collect::<Result<_>>()?;
    Ok((pass.logits(), maps))
}

/// Grad-CAM for one `(C, H, W)` image.
pub fn gradcam(model: &ClassifierModel, image: &Array3<f64>, choice: ClassChoice) -> Result<Heatmap> {
    let batch = image.clone().insert_axis(Axis(0));
    let classes = match choice {
        ClassChoice::Top1 => None,
        ClassChoice::Class(c) => Some(vec![c]),
    };
    let mut maps = gradcam_batch(model, &batch, classes.as_deref())?;
    Ok(maps.remove(0))
}

/// Differentiable Grad-CAM on the graph.
///
/// `activations` and `gradients` are `(N, K, H', W')`; the gradients should
/// come from a `create_graph` backward pass so the result depends on the
/// network parameters through both. Returns normalized heatmaps `(N, 1, H, W)`
/// and the per-sample maximum of the upsampled raw map (zero means the map
/// is identically zero).
pub fn heatmaps_graph(activations: &Tensor, gradients: &Tensor, target: (usize, usize)) -> (Tensor, Vec<f64>) {
    let shape = activations.shape().to_vec();
    assert_eq!(shape.len(), 4);
    assert_eq!(gradients.shape(), &shape[..]);
    let alpha = gradients.mean_axes(&[2, 3]);
    let raw = activations.mul(&alpha).sum_axes(&[1]).relu();
    let rows = Arc::new(bilinear_matrix(shape[2], target.0));
    let cols = Arc::new(bilinear_matrix(shape[3], target.1));
    let up = raw.separable(rows, cols);
    let max = up.max_trailing(2);
    let peaks = max.value().iter().copied().collect();
    let normalized = up.div(&max.add_scalar(NORMALIZE_EPS));
    (normalized, peaks)
}

/// First line of a raw heatmap file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapHeader {
    pub format: String,
    /// `[H, W]`.
    pub shape: [usize; 2],
    pub dtype: String,
    pub class_index: usize,
    pub image_id: String,
}

pub const HEATMAP_FORMAT: &str = "ria-heatmap-v1";

/// Writes a JSON header line followed by `H·W` little-endian `f64` values in row-major order.
pub fn write_heatmap_file(path: &Path, heatmap: &Heatmap, image_id: &str) -> Result<()> {
    let header = HeatmapHeader {
        format: HEATMAP_FORMAT.into(),
        shape: [heatmap.height(), heatmap.width()],
        dtype: "f64-le".into(),
        class_index: heatmap.class_index,
        image_id: image_id.into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in heatmap.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| RiaError::io(path, e))
}

pub fn read_heatmap_file(path: &Path) -> Result<(HeatmapHeader, Array2<f64>)> {
    let bytes = fs::read(path).map_err(|e| RiaError::io(path, e))?;
    let bad = |m: &str| RiaError::Data(format!("{}: {m}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header: HeatmapHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(&e.to_string()))?;
    if header.format != HEATMAP_FORMAT || header.dtype != "f64-le" {
        return Err(bad("unsupported heatmap format"));
    }
    let data = &bytes[nl + 1..];
    let [h, w] = header.shape;
    if data.len() != h * w * 8 {
        return Err(bad("data length does not match the header shape"));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let values = Array2::from_shape_vec((h, w), values).expect("length checked");
    Ok((header, values))
}
