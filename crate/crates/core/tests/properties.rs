use std::sync::Arc;

use imprint_core::adapters::{AdapterParams, LowRankPair};
use imprint_core::engine::should_stop;
use imprint_core::extractors::stubs::{MeanColorStub, PixelStub};
use imprint_core::extractors::ExtractorHandle;
use imprint_core::image::{BoundingBox, Image, Mask};
use imprint_core::losses::{background_loss, similarity_loss, LossWeights};
use imprint_core::segmentation::{invert_mask, segment_box, stubs::ColorKeySegmenter};
use imprint_core::tensor::Tensor;
use proptest::prelude::*;

/// Independent restatement of the stopping rule: scan the window for any
/// loss that beats the earlier best by more than x percent.
fn brute_should_stop(h: &[f64], x: f64, n: usize) -> bool {
    if h.len() <= n {
        return false;
    }
    let cut = h.len() - n;
    let mut prior = h[0];
    for v in &h[1..cut] {
        if *v < prior {
            prior = *v;
        }
    }
    let needed = prior.abs() * x / 100.0;
    for v in &h[cut..] {
        if prior - *v > needed {
            return false;
        }
    }
    true
}

fn histories() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0f64..10.0, 1..30),
        // Coarse values make ties and exact-threshold cases common.
        prop::collection::vec((0u32..40).prop_map(|k| k as f64 * 0.25), 1..30),
        prop::collection::vec(-5.0f64..5.0, 1..30),
    ]
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| Mask::new(h, w, bits).unwrap())
}

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn should_stop_matches_brute_force(h in histories(), x in prop_oneof![Just(3.0), 0.0f64..20.0], n in 1usize..10) {
        prop_assert_eq!(should_stop(&h, x, n), brute_should_stop(&h, x, n));
    }

    #[test]
    fn mask_complementarity(m in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| mask_strategy(h, w))) {
        let inv = m.inverted();
        prop_assert!(m.intersection(&inv).unwrap().is_empty());
        prop_assert_eq!(m.union(&inv).unwrap().count(), m.height() * m.width());
        prop_assert_eq!(inv.inverted(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_serde_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 12), scale in 0.1f64..4.0) {
        let pair = LowRankPair {
            layer: "x.attn.to_q".into(),
            down: Tensor::from_vec(2, 3, vals[..6].to_vec()).unwrap(),
            up: Tensor::from_vec(3, 2, vals[6..].to_vec()).unwrap(),
        };
        let a = AdapterParams::from_pairs(2, scale, vec![pair]).unwrap();
        let back: AdapterParams = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn loss_components_are_non_negative(g in image_strategy(4, 4), r in image_strategy(4, 4), m in mask_strategy(4, 4)) {
        let px = || ExtractorHandle::new("px", Arc::new(PixelStub::new(4, 4))).unwrap();
        let rep = similarity_loss(&g, &r, &px(), &ExtractorHandle::new("mc", Arc::new(MeanColorStub)).unwrap(), LossWeights::default()).unwrap();
        prop_assert!(rep.sim_dino >= 0.0 && rep.sim_ir >= 0.0 && rep.total >= 0.0);
        prop_assert!(background_loss(&g, &r, &m).unwrap() >= 0.0);
    }

    #[test]
    fn weight_homogeneity(g in image_strategy(4, 4), r in image_strategy(4, 4), k in prop_oneof![Just(0.5), Just(2.0), Just(4.0)]) {
        let px = || ExtractorHandle::new("px", Arc::new(PixelStub::new(4, 4))).unwrap();
        let mc = || ExtractorHandle::new("mc", Arc::new(MeanColorStub)).unwrap();
        let w = LossWeights { a: 1.5, b: 0.75, c: 10.0 };
        let base = similarity_loss(&g, &r, &px(), &mc(), w).unwrap();
        let scaled = similarity_loss(&g, &r, &px(), &mc(), LossWeights { a: k * w.a, b: k * w.b, c: w.c }).unwrap();
        prop_assert_eq!(scaled.total, k * base.total);
    }

    #[test]
    fn background_loss_is_count_weighted(
        g in image_strategy(4, 4),
        r in image_strategy(4, 4),
        split in mask_strategy(4, 4),
        keep in mask_strategy(4, 4),
    ) {
        // Two disjoint background regions R1 = keep ∧ split, R2 = keep ∧ ¬split.
        let r1 = keep.intersection(&split).unwrap();
        let r2 = keep.intersection(&split.inverted()).unwrap();
        let whole = background_loss(&g, &r, &r1.union(&r2).unwrap().inverted()).unwrap();
        let (n1, n2) = (r1.count() as f64, r2.count() as f64);
        let expected = if n1 + n2 == 0.0 {
            0.0
        } else {
            (n1 * background_loss(&g, &r, &r1.inverted()).unwrap() + n2 * background_loss(&g, &r, &r2.inverted()).unwrap()) / (n1 + n2)
        };
        prop_assert!((whole - expected).abs() <= 1e-12, "{} vs {}", whole, expected);
    }

    #[test]
    fn segmented_mask_stays_in_its_box(x0 in 0usize..6, y0 in 0usize..6, w in 1usize..6, h in 1usize..6, m in mask_strategy(12, 12)) {
        let img = Image::from_fn(12, 12, |y, x| if m.get(y, x) { [1.0, 0.0, 0.0] } else { [0.0; 3] });
        let bbox = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let seg = ColorKeySegmenter { color: [1.0, 0.0, 0.0], tolerance: 1e-9 };
        let sm = segment_box(Some(&seg), &img, &bbox, "thing", 1.0).unwrap();
        let dilated_box = Mask::from_box(12, 12, &bbox.dilated(3, 12, 12));
        prop_assert!(sm.mask.dilated(3).intersection(&dilated_box.inverted()).unwrap().is_empty());
        let inv = invert_mask(&sm);
        prop_assert!(sm.mask.intersection(&inv).unwrap().is_empty());
        prop_assert_eq!(sm.mask.union(&inv).unwrap().count(), 144);
    }
}
