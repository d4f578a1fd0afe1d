// SPDX-License-Identifier: Apache-2.0

//! Heatmap → bounding box.
//!
//! The hard path thresholds the heatmap, labels 8-connected components and
//! keeps the tight box of the highest-scoring component. The soft path
//! replaces the threshold with a sigmoid and summarizes the resulting soft
//! mask by its weighted mean and spread, which is differentiable.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiaError};
use crate::gradcam::Heatmap;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_KAPPA: f64 = 1.732_050_807_568_877_2;
/// Soft masks lighter than this carry no usable box.
pub const MIN_SOFT_MASS: f64 = 1e-6;

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(RiaError::Input(format!(
                "invalid box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        BBox {
            x_min: 0,
            y_min: 0,
            x_max: width - 1,
            y_max: height - 1,
        }
    }

    pub fn width_px(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height_px(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    /// Inclusive pixel count.
    pub fn area(&self) -> usize {
        self.width_px() * self.height_px()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min <= x_max && y_min <= y_max).then_some(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max < width && self.y_max < height
    }

    /// Boolean raster of the box on a `(height, width)` grid.
    pub fn rasterize(&self, width: usize, height: usize) -> Array2<bool> {
        Array2::from_shape_fn((height, width), |(y, x)| self.contains(x, y))
    }
}

/// Real-valued rectangle, used for the soft box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectF {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RectF {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Pixel box covering the rectangle after rounding its edges.
    pub fn to_pixel_box(&self) -> BBox {
        let r = |v: f64| v.round().max(0.0) as usize;
        BBox {
            x_min: r(self.x_min),
            y_min: r(self.y_min),
            x_max: r(self.x_max).max(r(self.x_min)),
            y_max: r(self.y_max).max(r(self.y_min)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub values: Array2<bool>,
    pub threshold_used: f64,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

pub fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(RiaError::Config(format!("threshold {t} must lie strictly between 0 and 1")));
    }
    Ok(())
}

/// Marks pixels strictly above `t`.
pub fn binarize(heatmap: &Heatmap, t: f64) -> Result<BinaryMask> {
    binarize_values(&heatmap.values, t)
}

pub fn binarize_values(values: &Array2<f64>, t: f64) -> Result<BinaryMask> {
    check_threshold(t)?;
    Ok(BinaryMask {
        values: values.mapv(|v| v > t),
        threshold_used: t,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// `(row, col)` pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BBox,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new() -> Self {
        DisjointSet { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// 8-connected component labels; 0 is background, components are numbered
/// from 1 in order of their first pixel in raster order.
pub fn label_components(mask: &Array2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut provisional = Array2::<usize>::from_elem((h, w), usize::MAX);
    let mut sets = DisjointSet::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut label = None;
            let neighbours = [
                (x > 0).then(|| (y, x - 1)),
                (y > 0 && x > 0).then(|| (y - 1, x - 1)),
                (y > 0).then(|| (y - 1, x)),
                (y > 0 && x + 1 < w).then(|| (y - 1, x + 1)),
            ];
            for (ny, nx) in neighbours.into_iter().flatten() {
                let l = provisional[[ny, nx]];
                if l == usize::MAX {
                    continue;
                }
                match label {
                    None => label = Some(l),
                    Some(cur) => sets.union(cur, l),
                }
            }
            provisional[[y, x]] = label.unwrap_or_else(|| sets.make());
        }
    }
    let mut remap = vec![0usize; sets.parent.len()];
    let mut next = 0;
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p = provisional[[y, x]];
            if p == usize::MAX {
                continue;
            }
            let root = sets.find(p);
            if remap[root] == 0 {
                next += 1;
                remap[root] = next;
            }
            labels[[y, x]] = remap[root];
        }
    }
    (labels, next)
}

/// Maximal 8-connected regions of set pixels, each with its tight box.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    components_of(&mask.values)
}

pub fn components_of(mask: &Array2<bool>) -> Vec<Component> {
    let (labels, count) = label_components(mask);
    let mut comps: Vec<Component> = (0..count)
        .map(|_| Component {
            pixels: Vec::new(),
            bbox: BBox {
                x_min: usize::MAX,
                y_min: usize::MAX,
                x_max: 0,
                y_max: 0,
            },
        })
        .collect();
    for ((y, x), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let c = &mut comps[l - 1];
        c.pixels.push((y, x));
        c.bbox.x_min = c.bbox.x_min.min(x);
        c.bbox.y_min = c.bbox.y_min.min(y);
        c.bbox.x_max = c.bbox.x_max.max(x);
        c.bbox.y_max = c.bbox.y_max.max(y);
    }
    comps
}

/// The chosen component and its score (sum of heatmap values over its pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub bbox: BBox,
    pub score: f64,
    pub pixel_count: usize,
}

/// Picks the component with the largest heatmap mass. Ties go to the larger
/// component, then to the smaller `(y_min, x_min)`.
pub fn select_box(heatmap: &Heatmap, components: &[Component]) -> Option<BBox> {
    select_component(&heatmap.values, components).map(|s| s.bbox)
}

pub fn select_component(values: &Array2<f64>, components: &[Component]) -> Option<Selection> {
    let mut best: Option<Selection> = None;
    for c in components {
        let score: f64 = c.pixels.iter().map(|&p| values[p]).sum();
        let cand = Selection {
            bbox: c.bbox,
            score,
            pixel_count: c.pixels.len(),
        };
        let better = match &best {
            None => true,
            Some(b) => {
                if cand.score != b.score {
                    cand.score > b.score
                } else if cand.pixel_count != b.pixel_count {
                    cand.pixel_count > b.pixel_count
                } else {
                    (cand.bbox.y_min, cand.bbox.x_min) < (b.bbox.y_min, b.bbox.x_min)
                }
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best
}

/// Summary of the hard path for one heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct HardBox {
    pub selection: Option<Selection>,
    pub component_count: usize,
}

/// Threshold → components → highest-scoring box.
pub fn hard_box(values: &Array2<f64>, t: f64) -> Result<HardBox> {
    let mask = binarize_values(values, t)?;
    let comps = connected_components(&mask);
    Ok(HardBox {
        selection: select_component(values, &comps),
        component_count: comps.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftBox {
    /// `(μx, μy)` in pixel coordinates.
    pub center: (f64, f64),
    /// `(σx, σy)`.
    pub extent: (f64, f64),
    pub mass: f64,
    pub kappa: f64,
    /// Image `(width, height)` used for clipping.
    pub image_size: (usize, usize),
}

/// Mass-weighted mean and standard deviation of pixel coordinates under the
/// soft mask `sigmoid((heatmap − T)/τ)`. `None` when the saliency is degenerate.
pub fn soft_box(heatmap: &Heatmap, tau: f64, t: f64, kappa: f64) -> Result<Option<SoftBox>> {
    soft_box_values(&heatmap.values, tau, t, kappa)
}

pub fn soft_box_values(values: &Array2<f64>, tau: f64, t: f64, kappa: f64) -> Result<Option<SoftBox>> {
    if !(tau > 0.0) || !(kappa > 0.0) {
        return Err(RiaError::Config(format!("tau ({tau}) and kappa ({kappa}) must be positive")));
    }
    check_threshold(t)?;
    let (h, w) = values.dim();
    if values.iter().all(|&v| v <= 0.0) {
        return Ok(None);
    }
    let m = values.mapv(|v| sigmoid((v - t) / tau));
    let mass: f64 = m.sum();
    if mass < MIN_SOFT_MASS {
        return Ok(None);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((y, x), &v) in m.indexed_iter() {
        sx += v * x as f64;
        sy += v * y as f64;
    }
    let (mx, my) = (sx / mass, sy / mass);
    let (mut vx, mut vy) = (0.0, 0.0);
    for ((y, x), &v) in m.indexed_iter() {
        vx += v * (x as f64 - mx).powi(2);
        vy += v * (y as f64 - my).powi(2);
    }
    Ok(Some(SoftBox {
        center: (mx, my),
        extent: ((vx / mass).sqrt(), (vy / mass).sqrt()),
        mass,
        kappa,
        image_size: (w, h),
    }))
}

/// `[μ − κσ, μ + κσ]` per axis, clipped to the image.
pub fn soft_box_to_rect(sb: &SoftBox) -> RectF {
    let (w, h) = sb.image_size;
    let xmax = (w.max(1) - 1) as f64;
    let ymax = (h.max(1) - 1) as f64;
    let (mx, my) = sb.center;
    let (sx, sy) = sb.extent;
    RectF {
        x_min: (mx - sb.kappa * sx).clamp(0.0, xmax),
        x_max: (mx + sb.kappa * sx).clamp(0.0, xmax),
        y_min: (my - sb.kappa * sy).clamp(0.0, ymax),
        y_max: (my + sb.kappa * sy).clamp(0.0, ymax),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn heatmap(values: Array2<f64>) -> Heatmap {
        let source_size = values.dim();
        Heatmap {
            values,
            class_index: 0,
            source_size,
        }
    }

    #[test]
    fn threshold_is_strict() {
        let m = binarize(&heatmap(array![[0.9, 0.1], [0.6, 0.5]]), 0.5).unwrap();
        assert_eq!(m.values, array![[true, false], [true, false]]);
    }

    #[test]
    fn zero_heatmap_gives_empty_mask() {
        let m = binarize(&heatmap(Array2::zeros((4, 4))), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(m.count(), 0);
        assert!(connected_components(&m).is_empty());
        assert_eq!(select_box(&heatmap(Array2::zeros((4, 4))), &[]), None);
    }

    #[test]
    fn threshold_outside_unit_interval_rejected() {
        let h = heatmap(Array2::zeros((2, 2)));
        for t in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(binarize(&h, t), Err(RiaError::Config(_))));
        }
    }

    #[test]
    fn diagonal_neighbours_are_connected() {
        let mask = array![[true, false], [false, true]];
        let comps = components_of(&mask);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].bbox, BBox::new(0, 0, 1, 1).unwrap());
    }

    #[test]
    fn zero_row_separates_components() {
        let mask = array![[true], [false], [true]];
        assert_eq!(components_of(&mask).len(), 2);
    }

    #[test]
    fn u_shape_merges_late() {
        // Two arms that only join at the bottom row.
        let mask = array![
            [true, false, true],
            [true, false, true],
            [true, true, true],
        ];
        let comps = components_of(&mask);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].pixels.len(), 7);
    }

    #[test]
    fn single_component_selected() {
        let v = array![[0.0, 0.0, 0.0], [0.0, 0.8, 0.9], [0.0, 0.7, 0.0]];
        let hb = hard_box(&v, 0.5).unwrap();
        assert_eq!(hb.component_count, 1);
        assert_eq!(hb.selection.unwrap().bbox, BBox::new(1, 1, 2, 2).unwrap());
    }

    #[test]
    fn highest_mass_component_wins() {
        let v = array![
            [0.9, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.6, 0.7],
            [0.0, 0.0, 0.6, 1.0],
        ];
        let hb = hard_box(&v, 0.5).unwrap();
        assert_eq!(hb.component_count, 2);
        let sel = hb.selection.unwrap();
        assert_eq!(sel.bbox, BBox::new(2, 1, 3, 2).unwrap());
        assert!((sel.score - 2.9).abs() < 1e-12);
    }

    #[test]
    fn equal_mass_and_size_prefers_earlier_box() {
        let v = array![[0.6, 0.0, 0.6], [0.0, 0.0, 0.0], [0.6, 0.0, 0.0]];
        let sel = hard_box(&v, 0.5).unwrap().selection.unwrap();
        assert_eq!(sel.bbox, BBox::new(0, 0, 0, 0).unwrap());
    }

    #[test]
    fn equal_mass_prefers_more_pixels() {
        let v = array![[1.0, 0.0, 0.75], [0.0, 0.0, 0.25]];
        let comps = vec![
            Component {
                pixels: vec![(0, 0)],
                bbox: BBox::new(0, 0, 0, 0).unwrap(),
            },
            Component {
                pixels: vec![(0, 2), (1, 2)],
                bbox: BBox::new(2, 0, 2, 1).unwrap(),
            },
        ];
        let sel = select_component(&v, &comps).unwrap();
        assert_eq!(sel.pixel_count, 2);
    }

    fn block(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| if y >= y0 && y <= y1 && x >= x0 && x <= x1 { 1.0 } else { 0.0 })
    }

    #[test]
    fn soft_box_of_uniform_block() {
        let v = block(32, 32, 10, 21, 10, 21);
        let sb = soft_box_values(&v, 0.01, 0.5, DEFAULT_KAPPA).unwrap().unwrap();
        // Discrete uniform on n=12 points: mean 15.5, variance (n²-1)/12.
        let sd = ((144.0 - 1.0) / 12.0_f64).sqrt();
        assert!((sb.center.0 - 15.5).abs() < 1e-9);
        assert!((sb.center.1 - 15.5).abs() < 1e-9);
        assert!((sb.extent.0 - sd).abs() < 1e-9);
        assert!((sb.mass - 144.0).abs() < 1e-9);
        let r = soft_box_to_rect(&sb);
        for (got, want) in [(r.x_min, 10.0), (r.x_max, 21.0), (r.y_min, 10.0), (r.y_max, 21.0)] {
            assert!((got - want).abs() <= 1.0, "{got} vs {want}");
        }
    }

    #[test]
    fn mirror_symmetric_heatmap_centers_horizontally() {
        let v = Array2::from_shape_fn((10, 16), |(y, x)| {
            let d = (x as f64 - 7.5).abs();
            (1.0 - d / 8.0) * (y as f64 / 10.0)
        });
        let sb = soft_box_values(&v, 0.05, 0.5, DEFAULT_KAPPA).unwrap().unwrap();
        assert!((sb.center.0 - 7.5).abs() < 1e-9);
    }

    #[test]
    fn zero_heatmap_is_degenerate() {
        assert_eq!(soft_box_values(&Array2::zeros((8, 8)), 0.05, 0.5, DEFAULT_KAPPA).unwrap(), None);
    }

    #[test]
    fn zero_spread_gives_point_rectangle() {
        let sb = SoftBox {
            center: (3.0, 4.0),
            extent: (0.0, 0.0),
            mass: 1.0,
            kappa: DEFAULT_KAPPA,
            image_size: (8, 8),
        };
        let r = soft_box_to_rect(&sb);
        assert_eq!((r.x_min, r.x_max, r.y_min, r.y_max), (3.0, 3.0, 4.0, 4.0));
        assert_eq!(r.width() * r.height(), 0.0);
    }

    #[test]
    fn rectangle_is_clipped_to_image() {
        let sb = SoftBox {
            center: (1.0, 6.0),
            extent: (5.0, 5.0),
            mass: 1.0,
            kappa: 2.0,
            image_size: (8, 8),
        };
        let r = soft_box_to_rect(&sb);
        assert!(r.x_min >= 0.0 && r.y_min >= 0.0 && r.x_max <= 7.0 && r.y_max <= 7.0);
    }

    #[test]
    fn box_geometry() {
        let a = BBox::new(0, 0, 1, 1).unwrap();
        let b = BBox::new(1, 1, 2, 2).unwrap();
        assert_eq!(a.area(), 4);
        assert_eq!(a.intersection(&b).unwrap().area(), 1);
        assert!(BBox::new(2, 0, 1, 0).is_err());
        assert!(BBox::full(4, 3).contains_box(&a));
        assert_eq!(a.rasterize(3, 3).iter().filter(|&&v| v).count(), 4);
    }
}
