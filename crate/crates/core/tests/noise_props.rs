// SPDX-License-Identifier: Apache-2.0

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use ria_core::noise::{self, Region};

fn image_and_mask(h: usize, w: usize) -> impl Strategy<Value = (Array3<f64>, Array2<bool>)> {
    (
        prop::collection::vec(0.0f64..=1.0, 3 * h * w),
        prop::collection::vec(any::<bool>(), h * w),
    )
        .prop_map(move |(v, m)| {
            (
                Array3::from_shape_vec((3, h, w), v).unwrap(),
                Array2::from_shape_vec((h, w), m).unwrap(),
            )
        })
}

proptest! {
    #[test]
    fn noise_stays_in_its_region((image, mask) in image_and_mask(8, 8), sigma in 0.0f64..1.0, seed in any::<u64>(), fg in any::<bool>()) {
        let region = if fg { Region::Foreground } else { Region::Background };
        let out = noise::add_region_noise(&image, &mask, sigma, region, seed).unwrap();
        for ((c, y, x), v) in out.indexed_iter() {
            prop_assert!((0.0..=1.0).contains(v));
            if mask[[y, x]] != fg {
                prop_assert_eq!(v.to_bits(), image[[c, y, x]].to_bits());
            }
        }
        let again = noise::add_region_noise(&image, &mask, sigma, region, seed).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn rfs_is_antisymmetric(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        prop_assert_eq!(noise::rfs(a, b), -noise::rfs(b, a));
        prop_assert_eq!(noise::rfs(a, a), 0.0);
    }

    #[test]
    fn derived_seeds_differ_across_cells(seed in any::<u64>(), i in 0usize..8, j in 0usize..64) {
        let s = noise::derive_seed(seed, i, j);
        prop_assert_ne!(s, noise::derive_seed(seed, i + 1, j));
        prop_assert_ne!(s, noise::derive_seed(seed, i, j + 1));
    }
}

#[test]
fn aggregate_ignores_the_clean_level() {
    let sigmas = [0.0, 0.1, 0.2];
    approx::assert_abs_diff_eq!(noise::aggregate_rfs(&sigmas, &[5.0, 0.2, 0.4]), 0.3, epsilon = 1e-12);
    assert_eq!(noise::aggregate_rfs(&[0.0], &[0.3]), 0.0);
}
