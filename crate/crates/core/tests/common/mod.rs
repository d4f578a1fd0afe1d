// SPDX-License-Identifier: Apache-2.0

//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use ndarray::Array2;
use ria_core::saliency::BBox;

/// Components by breadth-first flood fill, each as a sorted pixel set,
/// listed in order of first pixel in raster order.
pub fn flood_fill(mask: &Array2<bool>) -> Vec<BTreeSet<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                comp.insert((cy, cx));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = cy as i64 + dy;
                        let nx = cx as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let p = (ny as usize, nx as usize);
                        if mask[p] && !seen[p] {
                            seen[p] = true;
                            queue.push_back(p);
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

pub fn pixel_set(b: &BBox) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    for y in b.y_min..=b.y_max {
        for x in b.x_min..=b.x_max {
            s.insert((y, x));
        }
    }
    s
}

/// IoU by counting pixels in explicit sets.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let (sa, sb) = (pixel_set(a), pixel_set(b));
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

/// Fraction of `b_gc`'s pixels that lie inside `b_od`, by counting.
pub fn iou_hat_oracle(b_od: &BBox, b_gc: &BBox) -> f64 {
    let (so, sg) = (pixel_set(b_od), pixel_set(b_gc));
    so.intersection(&sg).count() as f64 / sg.len() as f64
}

/// Tight box around a non-empty pixel set.
pub fn tight_box(pixels: &BTreeSet<(usize, usize)>) -> BBox {
    let ys = pixels.iter().map(|p| p.0);
    let xs = pixels.iter().map(|p| p.1);
    BBox::new(
        xs.clone().min().unwrap(),
        ys.clone().min().unwrap(),
        xs.max().unwrap(),
        ys.max().unwrap(),
    )
    .unwrap()
}

/// Checks that labeled components equal the flood-fill partition, including order.
pub fn components_match_oracle(mask: &Array2<bool>) -> bool {
    let ours = ria_core::saliency::components_of(mask);
    let oracle = flood_fill(mask);
    ours.len() == oracle.len()
        && ours.iter().zip(&oracle).all(|(c, o)| {
            let set: BTreeSet<_> = c.pixels.iter().copied().collect();
            set == *o && set.len() == c.pixels.len() && c.bbox == tight_box(o)
        })
}

pub fn mask_from_bits(bits: u32, h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| bits >> (y * w + x) & 1 == 1)
}
