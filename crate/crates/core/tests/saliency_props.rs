// SPDX-License-Identifier: Apache-2.0

mod common;

use ndarray::Array2;
use proptest::prelude::*;
use ria_core::saliency::{self, BBox};

fn heatmap_strategy(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..1.0, h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

#[test]
fn all_3x3_masks_match_flood_fill() {
    for bits in 0..512u32 {
        let mask = common::mask_from_bits(bits, 3, 3);
        assert!(common::components_match_oracle(&mask), "mask {bits:09b}");
    }
}

proptest! {
    #[test]
    fn random_masks_match_flood_fill(bits in prop::collection::vec(any::<bool>(), 16 * 16)) {
        let mask = Array2::from_shape_vec((16, 16), bits).unwrap();
        prop_assert!(common::components_match_oracle(&mask));
    }

    #[test]
    fn hard_box_is_tight_around_chosen_component(values in heatmap_strategy(12, 12), t in 0.05f64..0.95) {
        let hb = saliency::hard_box(&values, t).unwrap();
        let mask = values.mapv(|v| v > t);
        let comps = common::flood_fill(&mask);
        prop_assert_eq!(hb.component_count, comps.len());
        match hb.selection {
            None => prop_assert!(comps.is_empty()),
            Some(sel) => {
                let comp = comps.iter().find(|c| common::tight_box(c) == sel.bbox && c.len() == sel.pixel_count);
                prop_assert!(comp.is_some());
                let best = comps
                    .iter()
                    .map(|c| c.iter().map(|&p| values[p]).sum::<f64>())
                    .fold(f64::MIN, f64::max);
                prop_assert!((sel.score - best).abs() < 1e-12);
                for &(y, x) in comp.unwrap() {
                    prop_assert!(values[[y, x]] > t);
                }
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_pixels(values in heatmap_strategy(10, 10), a in 0.05f64..0.95, b in 0.05f64..0.95) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m_lo = saliency::binarize_values(&values, lo).unwrap();
        let m_hi = saliency::binarize_values(&values, hi).unwrap();
        for (p, q) in m_hi.values.iter().zip(m_lo.values.iter()) {
            prop_assert!(!*p || *q);
        }
    }

    #[test]
    fn soft_rect_tracks_single_block(y0 in 0usize..20, x0 in 0usize..20, h in 4usize..12, w in 4usize..12) {
        let values = Array2::from_shape_fn((32, 32), |(y, x)| {
            if y >= y0 && y < y0 + h && x >= x0 && x < x0 + w { 1.0 } else { 0.0 }
        });
        let hard = saliency::hard_box(&values, 0.5).unwrap().selection.unwrap().bbox;
        let sb = saliency::soft_box_values(&values, 0.02, 0.5, saliency::DEFAULT_KAPPA).unwrap().unwrap();
        let soft = saliency::soft_box_to_rect(&sb).to_pixel_box();
        let overlap = ria_core::loss::iou(&hard, &soft);
        prop_assert!(overlap > 0.7, "hard {:?} soft {:?} iou {}", hard, soft, overlap);
    }

    #[test]
    fn soft_box_stays_in_image(values in heatmap_strategy(9, 13)) {
        if let Some(sb) = saliency::soft_box_values(&values, 0.05, 0.5, saliency::DEFAULT_KAPPA).unwrap() {
            let r = saliency::soft_box_to_rect(&sb);
            prop_assert!(r.x_min >= 0.0 && r.x_max <= 12.0 && r.x_min <= r.x_max);
            prop_assert!(r.y_min >= 0.0 && r.y_max <= 8.0 && r.y_min <= r.y_max);
            let b: BBox = r.to_pixel_box();
            prop_assert!(b.fits(13, 9));
        }
    }
}
