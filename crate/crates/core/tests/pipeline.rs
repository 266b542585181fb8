mod common;

use common::*;
use kvcapsule::kvmodel::{new_cache, CacheMode, ModelShape};
use kvcapsule::pipeline::{decode_step, run_generation, Ablation, DecodeConfig, DecodePath};
use kvcapsule::valuecodec::MeanPolicy;
use kvcapsule::{retained_len, Error};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = (u64, usize, f64, usize, usize, usize, bool)> {
    (
        any::<u64>(),
        4usize..24,
        prop::sample::select(vec![0.25, 0.5, 1.0]),
        1usize..3,
        1usize..3,
        prop::sample::select(vec![2usize, 4]),
        any::<bool>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_equals_reconstruct((seed, n, ratio, h, g, d, global) in config()) {
        let mut r = rng(seed);
        let shape = ModelShape::new(2, h, h * g, d, 4).unwrap();
        let policy = if global { MeanPolicy::Global } else { MeanPolicy::PerSample };
        let bundle = random_bundle::<f64>(&mut r, &[ratio, ratio], n, d, h, policy, None);
        let input = prefill(&mut r, &shape, 2, 2, n);
        let cache = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::Both)).unwrap();
        let q = queries(&mut r, &shape);
        let rec = decode_step(&cache, &q, Some(&bundle), &DecodeConfig::new(DecodePath::Reconstruct)).unwrap();
        let fused = decode_step(&cache, &q, Some(&bundle), &DecodeConfig::new(DecodePath::Fused)).unwrap();
        for l in 0..2 {
            prop_assert!(rel_err(&fused.outputs[l], &rec.outputs[l]) < 1e-10);
            prop_assert!(rel_err(&fused.weights[l], &rec.weights[l]) < 1e-10);
        }
    }

    #[test]
    fn weights_are_distributions((seed, n, ratio, h, g, d, _) in config()) {
        let mut r = rng(seed);
        let shape = ModelShape::new(1, h, h * g, d, 2).unwrap();
        let bundle = random_bundle::<f64>(&mut r, &[ratio], n, d, h, MeanPolicy::PerSample, None);
        let input = prefill(&mut r, &shape, 1, 1, n);
        let cache = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::Both)).unwrap();
        let q = queries(&mut r, &shape);
        for path in [DecodePath::Reconstruct, DecodePath::Fused, DecodePath::StaticCompressed] {
            let out = decode_step(&cache, &q, Some(&bundle), &DecodeConfig::new(path)).unwrap();
            let w = &out.weights[0];
            prop_assert_eq!(w.cols(), 1 + n);
            for row in 0..w.rows() {
                let s: f64 = w.row(row).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12 && w.row(row).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn stored_rows_follow_retention((seed, n, ratio, h, _g, d, _) in config()) {
        let mut r = rng(seed);
        let shape = ModelShape::new(1, h, h, d, 2).unwrap();
        let bundle = random_bundle::<f32>(&mut r, &[ratio], n, d, h, MeanPolicy::PerSample, None);
        let input = prefill(&mut r, &shape, 3, 2, n);
        let cache = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::Both)).unwrap();
        let m = retained_len(ratio, n);
        prop_assert_eq!(cache.layer(0).vision_key_rows(), 2 * m);
        let s = cache.stored_bytes();
        prop_assert_eq!(s.vision, (2 * h * 2 * m * d * 2) as u64);
        prop_assert_eq!(s.mean, (h * 2 * d * 2) as u64);
    }
}

#[test]
fn identity_codec_reproduces_baseline_over_a_trace() {
    let mut r = rng(4);
    let shape = ModelShape::new(2, 2, 4, 4, 4).unwrap();
    let input = prefill::<f64>(&mut r, &shape, 3, 2, 9);
    let tr = trace(&mut r, &shape, 5);
    let bundle = kvcapsule::kvmodel::CodecBundle::identity(2, 9, 4, 2);
    let mut full = new_cache(shape, &input, None, CacheMode::Full).unwrap();
    let base = run_generation(&mut full, &tr, None, &DecodeConfig::default()).unwrap();
    for path in [DecodePath::Reconstruct, DecodePath::Fused, DecodePath::StaticCompressed] {
        let mut c = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::Both)).unwrap();
        let rep = run_generation(&mut c, &tr, Some(&bundle), &DecodeConfig::new(path)).unwrap();
        for (a, b) in rep.steps.iter().zip(&base.steps) {
            for l in 0..2 {
                assert!(rel_err(&a.outputs[l], &b.outputs[l]) < 1e-12, "{path:?}");
            }
        }
    }
}

#[test]
fn values_only_ablation_keeps_baseline_weights() {
    let mut r = rng(8);
    let shape = ModelShape::new(1, 1, 2, 4, 4).unwrap();
    let bundle = random_bundle::<f64>(&mut r, &[0.5], 12, 4, 1, MeanPolicy::PerSample, None);
    let input = prefill(&mut r, &shape, 2, 1, 12);
    let q = queries(&mut r, &shape);
    let full = new_cache(shape, &input, None, CacheMode::Full).unwrap();
    let base = decode_step(&full, &q, None, &DecodeConfig::default()).unwrap();
    let cfg = DecodeConfig { path: DecodePath::Reconstruct, ablation: Ablation::ValuesOnly, sigma: None };
    let c = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::ValuesOnly)).unwrap();
    let out = decode_step(&c, &q, Some(&bundle), &cfg).unwrap();
    assert!(rel_err(&out.weights[0], &base.weights[0]) < 1e-14);
    assert!(rel_err(&out.outputs[0], &base.outputs[0]) > 1e-6);
}

#[test]
fn fused_rejects_mlp_codecs() {
    let mut r = rng(2);
    let shape = ModelShape::new(1, 1, 1, 4, 4).unwrap();
    let bundle = random_bundle::<f64>(&mut r, &[0.5], 8, 4, 1, MeanPolicy::PerSample, Some(8));
    let input = prefill(&mut r, &shape, 1, 1, 8);
    let c = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::Both)).unwrap();
    let q = queries(&mut r, &shape);
    let err = decode_step(&c, &q, Some(&bundle), &DecodeConfig::new(DecodePath::Fused)).unwrap_err();
    assert!(matches!(err, Error::UnsupportedPath(_)), "{err}");
    assert!(decode_step(&c, &q, Some(&bundle), &DecodeConfig::new(DecodePath::Reconstruct)).is_ok());
}

#[test]
fn baseline_needs_full_cache() {
    let mut r = rng(3);
    let shape = ModelShape::new(1, 1, 1, 2, 4).unwrap();
    let bundle = random_bundle::<f64>(&mut r, &[1.0], 4, 2, 1, MeanPolicy::PerSample, None);
    let input = prefill(&mut r, &shape, 1, 1, 4);
    let c = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::Both)).unwrap();
    let q = queries(&mut r, &shape);
    assert!(decode_step(&c, &q, None, &DecodeConfig::default()).is_err());
    assert!(decode_step(&c, &q, None, &DecodeConfig::new(DecodePath::Fused)).is_err());
}
