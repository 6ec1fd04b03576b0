//! Randomized invariants over the geometry, codecs and metrics.

use attnage::attention::{box_to_image_space, crop_resize, min_perimeter_box, required_count};
use attnage::checkpoint::{decode_archive, encode_archive, Metadata};
use attnage::data::pgm::{decode_pgm, encode_pgm};
use attnage::metrics::{iou, r2_score};
use attnage::{BBox, CoordSpace, Grid, Mask, ParamSet, Tensor32, Tensor64};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Grid<bool>> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_filter("at least one active cell", |v| v.iter().any(|&b| b))
            .prop_map(move |v| Grid::new(h, w, v))
    })
}

fn box_strategy(side: usize) -> impl Strategy<Value = BBox> {
    (0..side, 0..side, 0..side, 0..side)
        .prop_map(|(a, b, c, d)| BBox::new(a.min(b), c.min(d), a.max(b), c.max(d), CoordSpace::Image).unwrap())
}

proptest! {
    #[test]
    fn coverage_box_is_feasible_and_no_larger_than_tight(bits in mask_strategy(), kappa in 0.05f64..=1.0) {
        let mask = Mask { bits: bits.clone(), tau: 0.5 };
        let active = mask.count();
        let b = min_perimeter_box(&mask, kappa).unwrap();
        prop_assert!(b.fits(bits.rows(), bits.cols()));
        let mut inside = 0;
        for r in b.r0..=b.r1 {
            for c in b.c0..=b.c1 {
                inside += bits.get(r, c) as usize;
            }
        }
        prop_assert!(inside >= required_count(kappa, active));
        let full = min_perimeter_box(&mask, 1.0).unwrap();
        prop_assert!(b.perimeter() <= full.perimeter());
    }

    #[test]
    fn image_space_box_contains_scaled_box(r0 in 0usize..12, c0 in 0usize..12, dr in 0usize..12, dc in 0usize..12, min_side in 1usize..40) {
        let (r1, c1) = ((r0 + dr).min(11), (c0 + dc).min(11));
        let b = BBox::new(r0, c0, r1, c1, CoordSpace::Feature).unwrap();
        let img = box_to_image_space(&b, 8, 96, min_side);
        prop_assert_eq!(img.space, CoordSpace::Image);
        prop_assert!(img.fits(96, 96));
        prop_assert!(img.height() >= min_side && img.width() >= min_side);
        prop_assert!(img.r0 <= r0 * 8 && img.c0 <= c0 * 8);
        prop_assert!(img.r1 >= (r1 + 1) * 8 - 1 && img.c1 >= (c1 + 1) * 8 - 1);
    }

    #[test]
    fn crop_of_constant_image_is_constant(value in -5.0f64..5.0, b in box_strategy(20), out in 1usize..24) {
        let img = Grid::filled(20, 20, value);
        let crop = crop_resize(&img, &b, out).unwrap();
        prop_assert_eq!((crop.rows(), crop.cols()), (out, out));
        prop_assert!(crop.data().iter().all(|&v| (v - value).abs() <= 1e-12));
    }

    #[test]
    fn crop_corners_sample_box_corners(b in box_strategy(16), out in 2usize..20, seed in any::<u64>()) {
        let img = Grid::from_fn(16, 16, |r, c| ((r * 31 + c * 17) as u64 ^ seed) as f64 % 97.0);
        let crop = crop_resize(&img, &b, out).unwrap();
        prop_assert_eq!(crop.get(0, 0), img.get(b.r0, b.c0));
        prop_assert_eq!(crop.get(out - 1, out - 1), img.get(b.r1, b.c1));
        prop_assert_eq!(crop.get(0, out - 1), img.get(b.r0, b.c1));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in box_strategy(30), b in box_strategy(30)) {
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn perfect_prediction_scores_one(y in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        prop_assume!(y.iter().any(|&v| v != y[0]));
        prop_assert_eq!(r2_score(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let img = Grid::from_fn(h, w, |r, c| (seed.wrapping_mul(r as u64 * 131 + c as u64 + 1) >> 56) as u8);
        prop_assert_eq!(decode_pgm(&encode_pgm(&img), "prop").unwrap(), img);
    }

    #[test]
    fn archive_round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>(), 1..40), extra in prop::collection::vec(any::<f64>(), 1..10)) {
        let mut p32 = ParamSet::new();
        p32.push("a.weight", Tensor32::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        p32.push("b", Tensor32::new(vec![1, values.len()], values).unwrap()).unwrap();
        let back = decode_archive::<f32>(&encode_archive(&p32).unwrap(), "prop").unwrap();
        for ((na, ta), (nb, tb)) in p32.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.dims(), tb.dims());
            prop_assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut p64 = ParamSet::new();
        p64.push("x", Tensor64::new(vec![extra.len()], extra).unwrap()).unwrap();
        let back = decode_archive::<f64>(&encode_archive(&p64).unwrap(), "prop").unwrap();
        let (a, b) = (p64.tensor(0).data(), back.tensor(0).data());
        prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn metadata_text_round_trip(pairs in prop::collection::btree_map("[a-z_]{1,8}", "[ -~&&[^=]]{0,12}", 0..8)) {
        let mut m = Metadata::new();
        for (k, v) in &pairs {
            m.set(k, v);
        }
        let back = Metadata::from_text(&m.to_text(), "prop").unwrap();
        for (k, v) in &pairs {
            prop_assert_eq!(back.get(k), Some(v.as_str()));
        }
    }
}
