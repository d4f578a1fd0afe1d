// SPDX-License-Identifier: Apache-2.0

mod common;

use proptest::prelude::*;
use ria_core::loss::{self, LossConfig};
use ria_core::saliency::BBox;

fn box_strategy(size: usize) -> impl Strategy<Value = BBox> {
    (0..size, 0..size, 0..size, 0..size).prop_map(|(a, b, c, d)| {
        BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
    })
}

proptest! {
    #[test]
    fn iou_matches_pixel_counting(a in box_strategy(24), b in box_strategy(24)) {
        prop_assert!((loss::iou(&a, &b) - common::iou_oracle(&a, &b)).abs() < 1e-9);
        prop_assert!((loss::iou_hat(&a, &b) - common::iou_hat_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_hat_bounds_and_containment(od in box_strategy(24), gc in box_strategy(24)) {
        let v = loss::iou_hat(&od, &gc);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v == 1.0, od.contains_box(&gc));
        prop_assert!(v >= loss::iou(&od, &gc));
        prop_assert_eq!(loss::iou(&od, &gc), loss::iou(&gc, &od));
    }

    #[test]
    fn ria_hard_is_bounded(od in box_strategy(32), gc in box_strategy(32)) {
        let cfg = LossConfig::default();
        let r = loss::ria_hard(&od, &gc, &cfg, (32, 32));
        // The penalty never exceeds lambda when normalized by the image diagonal.
        prop_assert!(r >= 0.0 && r <= 1.0 + cfg.lambda + 1e-12);
    }

    #[test]
    fn shrinking_inside_box_lowers_ria(x0 in 0usize..10, y0 in 0usize..10, grow in 1usize..10) {
        let cfg = LossConfig::default();
        let od = BBox::new(0, 0, 31, 31).unwrap();
        let small = BBox::new(x0, y0, x0 + grow, y0 + grow).unwrap();
        let large = BBox::new(x0, y0, x0 + grow + 5, y0 + grow + 5).unwrap();
        prop_assert!(loss::ria_hard(&od, &small, &cfg, (32, 32)) < loss::ria_hard(&od, &large, &cfg, (32, 32)));
    }
}
