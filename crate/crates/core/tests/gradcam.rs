mod common;

use image::{Rgb, RgbImage};
use maskscope::gradcam::*;
use maskscope::tensor_io::{TensorData, TensorRecord};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = (usize, usize, usize, Vec<f32>, Vec<f32>)> {
    (1usize..6, 1usize..8, 1usize..8).prop_flat_map(|(k, h, w)| {
        let n = k * h * w;
        (
            Just(k),
            Just(h),
            Just(w),
            prop::collection::vec(-1.0f32..1.0, n),
            prop::collection::vec(-1.0f32..1.0, n),
        )
    })
}

fn rec(k: usize, h: usize, w: usize, v: &[f32]) -> TensorRecord {
    TensorRecord::new(vec![k, h, w], TensorData::F32(v.to_vec())).unwrap()
}

proptest! {
    #[test]
    fn matches_brute_force((k, h, w, act, grad) in tensor()) {
        let weights = channel_weights(&rec(k, h, w, &grad)).unwrap();
        let w_ref = common::weights_oracle(&grad, k, h, w);
        for (a, b) in weights.iter().zip(&w_ref) {
            prop_assert!((*a as f64 - b).abs() < 1e-6);
        }

        let heat = compute_heatmap(&rec(k, h, w, &act), &weights).unwrap();
        let w_used: Vec<f64> = weights.iter().map(|&x| x as f64).collect();
        let h_ref = common::heatmap_oracle(&act, &w_used, k, h, w);
        for (a, b) in heat.values().iter().zip(&h_ref) {
            prop_assert!(*a >= 0.0);
            prop_assert!((*a as f64 - b).abs() < 1e-6);
        }

        let mask = normalize_mask(&heat);
        let hv: Vec<f64> = heat.values().iter().map(|&x| x as f64).collect();
        match common::normalize_oracle(&hv) {
            None => {
                prop_assert!(mask.degenerate);
                prop_assert!(mask.values.iter().all(|&v| v == 0.0));
            }
            Some(n_ref) => {
                prop_assert!(!mask.degenerate);
                for (a, b) in mask.values.iter().zip(&n_ref) {
                    prop_assert!((0.0..=1.0).contains(a));
                    prop_assert!((*a as f64 - b).abs() < 1e-6);
                }
                let max = mask.values.iter().cloned().fold(f32::MIN, f32::max);
                let min = mask.values.iter().cloned().fold(f32::MAX, f32::min);
                prop_assert_eq!((min, max), (0.0, 1.0));
            }
        }
    }

    #[test]
    fn normalization_ignores_positive_affine_maps(
        (h, w) in (2usize..10, 2usize..10),
        seed in any::<u64>(),
        log_a in -0.7f64..1.6,
        b_frac in 0.0f64..2.0,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = common::uniform_vec(&mut rng, h * w, 0.0, 1.0);
        x[0] = 0.0;
        x[1] = 1.0;
        let a = 10f64.powf(log_a) as f32;
        let b = (b_frac as f32) * a;
        let base = Heatmap::new(Array2::from_shape_vec((h, w), x.clone()).unwrap()).unwrap();
        let moved = Heatmap::new(Array2::from_shape_vec((h, w), x.iter().map(|v| a * v + b).collect()).unwrap()).unwrap();
        let (m0, m1) = (normalize_mask(&base), normalize_mask(&moved));
        for (p, q) in m0.values.iter().zip(m1.values.iter()) {
            prop_assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn upsampling_stays_within_source_range(
        (h, w) in (1usize..6, 1usize..6),
        (th, tw) in (1usize..40, 1usize..40),
        v in prop::collection::vec(0.0f32..1.0, 36),
    ) {
        let src = Array2::from_shape_vec((h, w), v[..h * w].to_vec()).unwrap();
        let up = upsample_bilinear(src.view(), (th, tw)).unwrap();
        prop_assert_eq!(up.dim(), (th, tw));
        let lo = src.iter().cloned().fold(f32::MAX, f32::min);
        let hi = src.iter().cloned().fold(f32::MIN, f32::max);
        prop_assert!(up.iter().all(|&x| x >= lo && x <= hi));
        if th > 1 && tw > 1 {
            prop_assert_eq!(up[[0, 0]], src[[0, 0]]);
            prop_assert_eq!(up[[th - 1, tw - 1]], src[[h - 1, w - 1]]);
            prop_assert_eq!(up[[0, tw - 1]], src[[0, w - 1]]);
        }
    }

    #[test]
    fn higher_threshold_selects_a_subset(
        v in prop::collection::vec(0.0f32..1.0, 1..64),
        t1 in 0.0f32..1.0,
        t2 in 0.0f32..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mask = NormalizedMask { values: Array2::from_shape_vec((1, v.len()), v).unwrap(), degenerate: false };
        let a = threshold_mask(&mask, lo).unwrap();
        let b = threshold_mask(&mask, hi).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            prop_assert!(!*y || *x);
        }
    }
}

#[test]
fn pipeline_equals_manual_composition() {
    let act = Array3::from_shape_fn((3, 4, 5), |(k, y, x)| ((k * 7 + y * 3 + x) % 5) as f32 * 0.3);
    let grad = Array3::from_shape_fn((3, 4, 5), |(k, y, x)| (k as f32 - 1.0) * 0.5 + (y * x) as f32 * 0.01);
    let set = mask_pipeline_arrays(act.view(), grad.view(), (17, 23), 0.4).unwrap();

    let w = channel_weights_array(grad.view());
    let heat = compute_heatmap_array(act.view(), &w).unwrap();
    let conv = normalize_mask(&heat);
    let image = upsample_bilinear(conv.values.view(), (17, 23)).unwrap();
    assert_eq!(set.conv, conv);
    assert_eq!(set.image.values, image);
    assert_eq!(set.binary.values, image.mapv(|v| v >= 0.4));
}

#[test]
fn explanation_keeps_selected_pixels_only() {
    let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40 + 1, y as u8 * 90 + 1, 7]));
    let sel = Array2::from_shape_fn((2, 3), |(y, x)| (x + y) % 2 == 0);
    let mask = BinaryMask { values: sel.clone(), threshold_used: 0.5 };
    let out = apply_explanation(&img, &mask).unwrap();
    for (x, y, px) in out.enumerate_pixels() {
        if sel[[y as usize, x as usize]] {
            assert_eq!(px, img.get_pixel(x, y));
        } else {
            assert_eq!(px.0, [0, 0, 0]);
        }
    }
    let wrong = BinaryMask { values: Array2::from_elem((3, 2), true), threshold_used: 0.5 };
    assert!(matches!(apply_explanation(&img, &wrong), Err(GradCamError::DimensionMismatch { .. })));
}

#[test]
fn rejects_mismatched_pairs() {
    let a = Array3::<f32>::zeros((2, 3, 3));
    let g = Array3::<f32>::zeros((2, 3, 4));
    assert!(matches!(conv_mask(a.view(), g.view()), Err(GradCamError::ShapeMismatch { .. })));
    let r = rec(2, 2, 2, &[0.0; 8]);
    assert!(matches!(compute_heatmap(&r, &[1.0]), Err(GradCamError::ChannelMismatch { .. })));
}
