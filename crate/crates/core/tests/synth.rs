use kvcapsule::kernels::singular_values;
use kvcapsule::synth::{gen_query_trace, gen_visual_kv, key_dataset, SynthProfile};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn key_rank_matches_profile(seed in any::<u64>(), n in 4usize..24, rank_frac in 0.0f64..1.0) {
        let rank = 1 + ((n - 1) as f64 * rank_frac) as usize;
        let profile = SynthProfile { seed, n, key_rank: rank, layers: 1, key_cosine: vec![0.8], ..SynthProfile::default() };
        let dump = gen_visual_kv::<f64>(&profile, 0).unwrap();
        // token-space rank: singular values of the n × d key matrix, d = 16
        let s = singular_values(&dump[0][0].keys).unwrap();
        let numeric = s.iter().filter(|&&v| v > 1e-6 * s[0].max(1.0)).count();
        prop_assert_eq!(numeric, rank.min(16));
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), sample in 0u64..100) {
        let profile = SynthProfile { seed, ..SynthProfile::default() };
        prop_assert_eq!(gen_visual_kv::<f32>(&profile, sample).unwrap(), gen_visual_kv::<f32>(&profile, sample).unwrap());
    }
}

#[test]
fn samples_and_seeds_differ() {
    let p = SynthProfile::default();
    assert_ne!(gen_visual_kv::<f32>(&p, 0).unwrap(), gen_visual_kv::<f32>(&p, 1).unwrap());
    let q = SynthProfile { seed: 1, ..p.clone() };
    assert_ne!(gen_visual_kv::<f32>(&p, 0).unwrap(), gen_visual_kv::<f32>(&q, 0).unwrap());
    assert_eq!(gen_query_trace::<f32>(&p, 3).unwrap(), gen_query_trace::<f32>(&p, 3).unwrap());
}

#[test]
fn dataset_layout_is_layer_sample_head() {
    let p = SynthProfile::default();
    let data = key_dataset::<f32>(&p, 5).unwrap();
    assert_eq!((data.len(), data[0].len(), data[0][0].len()), (3, 5, 2));
    assert_eq!(data[2][4][1].shape(), (32, 16));
}
