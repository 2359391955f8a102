mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use rfctl_core::augment::{make_pair, permute_segments, scale_frame, strong_augment, weak_augment};
use rfctl_core::{AugmentConfig, IqFrame};

fn frame_strategy() -> impl Strategy<Value = IqFrame> {
    (6usize..=64, any::<u64>()).prop_map(|(w, seed)| {
        let mut r = rng(seed);
        let data = (0..2 * w).map(|_| r.random_range(-3.0f32..3.0)).collect();
        IqFrame::new(data, w, 0).unwrap()
    })
}

fn sorted_bits(v: &[f32]) -> Vec<u32> {
    let mut b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
    b.sort_unstable();
    b
}

proptest! {
    #[test]
    fn identity_config_is_exact(f in frame_strategy(), seed in any::<u64>()) {
        let cfg = AugmentConfig::identity();
        let mut r = rng(seed);
        let pair = make_pair(&f, 3, &cfg, &mut r).unwrap();
        prop_assert_eq!(&pair.x_weak, &f);
        prop_assert_eq!(&pair.x_strong, &f);
        prop_assert_eq!(pair.transmission_id, 3);
    }

    #[test]
    fn unjittered_strong_view_keeps_row_multisets(f in frame_strategy(), seed in any::<u64>(), m in 1usize..=5) {
        let cfg = AugmentConfig { jitter_sigma: 0.0, max_segments: m, ..AugmentConfig::default() };
        let out = strong_augment(&f, &cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(sorted_bits(out.i()), sorted_bits(f.i()));
        prop_assert_eq!(sorted_bits(out.q()), sorted_bits(f.q()));
    }

    #[test]
    fn i_and_q_are_permuted_together(f in frame_strategy(), seed in any::<u64>()) {
        let cfg = AugmentConfig { jitter_sigma: 0.0, ..AugmentConfig::default() };
        let out = strong_augment(&f, &cfg, &mut rng(seed)).unwrap();
        let pairs = |g: &IqFrame| {
            let mut p: Vec<(u32, u32)> = g.i().iter().zip(g.q()).map(|(a, b)| (a.to_bits(), b.to_bits())).collect();
            p.sort_unstable();
            p
        };
        prop_assert_eq!(pairs(&out), pairs(&f));
    }

    #[test]
    fn augmentations_are_deterministic(f in frame_strategy(), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let a = make_pair(&f, 0, &cfg, &mut rng(seed)).unwrap();
        let b = make_pair(&f, 0, &cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn views_keep_shape(f in frame_strategy(), seed in any::<u64>()) {
        let pair = make_pair(&f, 0, &AugmentConfig::default(), &mut rng(seed)).unwrap();
        prop_assert_eq!(pair.x_weak.width(), f.width());
        prop_assert_eq!(pair.x_strong.width(), f.width());
        prop_assert_eq!(pair.x_strong.data().len(), 2 * f.width());
    }

    #[test]
    fn weak_view_is_a_positive_rescaling(f in frame_strategy(), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let w = weak_augment(&f, &cfg, &mut rng(seed));
        let argmax = |v: &[f32]| v.iter().enumerate().fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
        prop_assert_eq!(argmax(w.i()), argmax(f.i()));
        let k = f.i().iter().zip(w.i()).find(|(a, _)| a.abs() > 0.1).map(|(a, b)| b / a).unwrap();
        prop_assert!(k >= cfg.scale_low as f32 - 1e-4 && k <= cfg.scale_high as f32 + 1e-4);
    }
}

#[test]
fn three_segment_example() {
    let f = IqFrame::new(vec![1., 2., 3., 4., 5., 6., 0., 0., 0., 0., 0., 0.], 6, 0).unwrap();
    let out = permute_segments(&f, &[2, 0, 1]).unwrap();
    assert_eq!(out.i(), &[5., 6., 1., 2., 3., 4.]);
}

#[test]
fn all_ones_at_half_scale() {
    let f = IqFrame::new(vec![1.0; 8], 4, 0).unwrap();
    assert!(scale_frame(&f, 0.5).data().iter().all(|&v| v == 0.5));
}

#[test]
fn jitter_has_requested_relative_spread() {
    let mut r = rng(1);
    let w = 20_000;
    let data: Vec<f32> = (0..2 * w).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let f = IqFrame::new(data, w, 0).unwrap();
    let cfg = AugmentConfig { jitter_sigma: 0.1, max_segments: 1, ..AugmentConfig::default() };
    let out = strong_augment(&f, &cfg, &mut r).unwrap();
    let (_, std) = f.moments();
    let diff: Vec<f64> = out.data().iter().zip(f.data()).map(|(a, b)| (a - b) as f64).collect();
    let s = (diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64).sqrt();
    assert!((s / (0.1 * std) - 1.0).abs() < 0.03, "{s} vs {}", 0.1 * std);
}
