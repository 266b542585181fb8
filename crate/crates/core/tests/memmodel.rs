use kvcapsule::keycodec::ReconstructorKind;
use kvcapsule::memmodel::{break_even, footprint_base, footprint_ours, image_sweep, FootprintParams};
use kvcapsule::pipeline::make_schedule;
use kvcapsule::valuecodec::MeanPolicy;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = FootprintParams> {
    (
        (1u64..8, 1u64..8, 0u64..64, 1u64..64, 0u64..5, 0u64..64),
        (1u64..32, prop::sample::select(vec![1u64, 2, 4]), 1usize..12, 0.05f64..1.0, 0.0f64..1.0),
        (any::<bool>(), any::<bool>()),
    )
        .prop_map(|((batch, kv_heads, prompt, n, images, generated), (d, b, layers, r0, frac), (global, mlp))| {
            FootprintParams {
                batch,
                kv_heads,
                prompt_tokens: prompt,
                n,
                images,
                generated,
                d_head: d,
                kv_bytes: b,
                schedule: make_schedule(layers, r0, (r0 * frac).max(0.01).min(r0)).unwrap(),
                mean_policy: if global { MeanPolicy::Global } else { MeanPolicy::PerSample },
                kind: if mlp { ReconstructorKind::Mlp2 } else { ReconstructorKind::Linear },
                hidden: n,
            }
        })
}

proptest! {
    #[test]
    fn compressed_cache_never_exceeds_base(p in params()) {
        let base = footprint_base(&p).unwrap();
        let ours = footprint_ours(&p).unwrap();
        let cache: u64 = ours.per_layer.iter().map(|l| l.cache).sum();
        prop_assert!(cache <= base.total);
    }

    #[test]
    fn overhead_ignores_batch_and_generation(p in params(), batch in 1u64..16, t in 0u64..100) {
        let a = footprint_ours(&p).unwrap().overhead;
        let q = FootprintParams { batch, generated: t, ..p };
        prop_assert_eq!(footprint_ours(&q).unwrap().overhead, a);
    }

    #[test]
    fn global_policy_trades_means_for_codec(p in params()) {
        let per = footprint_ours(&FootprintParams { mean_policy: MeanPolicy::PerSample, ..p.clone() }).unwrap();
        let glob = footprint_ours(&FootprintParams { mean_policy: MeanPolicy::Global, ..p.clone() }).unwrap();
        let layers = p.layers() as u64;
        prop_assert_eq!(per.cache - glob.cache, layers * p.batch * p.kv_heads * p.images * p.d_head * p.kv_bytes);
        prop_assert_eq!(glob.overhead - per.overhead, layers * p.kv_heads * p.d_head * p.kv_bytes);
    }

    #[test]
    fn larger_batch_breaks_even_no_later(p in params()) {
        let sweep = image_sweep(p.n, 12);
        let one = break_even(&FootprintParams { batch: 1, ..p.clone() }, &sweep).unwrap();
        let two = break_even(&FootprintParams { batch: 2, ..p }, &sweep).unwrap();
        if let Some(c) = one.crossing {
            prop_assert!(two.crossing.is_some_and(|d| d <= c));
        }
    }
}

#[test]
fn base_matches_hand_count() {
    // 2 · B · H · (c + k·n + t) · d · b per layer
    let p = FootprintParams {
        batch: 2,
        kv_heads: 3,
        prompt_tokens: 5,
        n: 10,
        images: 2,
        generated: 7,
        d_head: 4,
        kv_bytes: 2,
        schedule: make_schedule(4, 0.5, 0.5).unwrap(),
        ..FootprintParams::planning_default()
    };
    assert_eq!(footprint_base(&p).unwrap().total, 4 * 2 * 2 * 3 * 32 * 4 * 2);
    // m = 5; cache 2·2·3·(5+10+7)·4·2, means 2·3·2·4·2, basis 3·5·10·2, θ 3·10·5·2
    let ours = footprint_ours(&p).unwrap();
    assert_eq!(ours.per_layer[0].cache, 2 * 2 * 3 * 22 * 4 * 2);
    assert_eq!(ours.per_layer[0].mean, 2 * 3 * 2 * 4 * 2);
    assert_eq!(ours.overhead, 4 * (3 * 50 * 2 + 3 * 50 * 2));
}

#[test]
fn sweep_csv_has_one_row_per_point() {
    let p = FootprintParams::planning_default();
    let be = break_even(&p, &image_sweep(p.n, 5)).unwrap();
    let csv = be.to_csv();
    assert!(csv.starts_with("vision_tokens,base_bytes,ours_bytes,savings_bytes\n"));
    assert_eq!(csv.lines().count(), 6);
}
