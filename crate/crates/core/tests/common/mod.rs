#![allow(dead_code)]

use kvcapsule::kernels::DenseMatrix;
use kvcapsule::keycodec::{HeadReconstructor, KeyCodec};
use kvcapsule::kvmodel::{CodecBundle, KvPair, LayerCodec, LayerKv, ModelShape};
use kvcapsule::pipeline::{QueryTrace, TraceStep};
use kvcapsule::valuecodec::{fit_value_pca, MeanPolicy};
use kvcapsule::{retained_len, Scalar};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<T> {
    DenseMatrix::from_fn(rows, cols, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)))
}

pub fn gauss_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    (0..len).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

pub fn pair<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> KvPair<T> {
    KvPair::new(gauss(rng, rows, d), gauss(rng, rows, d)).unwrap()
}

/// Random prefill: `text` tokens, then `images` images of `n` tokens, every layer.
pub fn prefill<T: Scalar>(rng: &mut ChaCha8Rng, shape: &ModelShape, text: usize, images: usize, n: usize) -> Vec<LayerKv<T>> {
    (0..shape.layers)
        .map(|_| LayerKv {
            text: (0..shape.kv_heads).map(|_| pair(rng, text, shape.head_dim)).collect(),
            images: (0..images)
                .map(|_| (0..shape.kv_heads).map(|_| pair(rng, n, shape.head_dim)).collect())
                .collect(),
        })
        .collect()
}

pub fn trace<T: Scalar>(rng: &mut ChaCha8Rng, shape: &ModelShape, steps: usize) -> QueryTrace<T> {
    let width = shape.kv_heads * shape.head_dim;
    QueryTrace {
        steps: (0..steps)
            .map(|_| TraceStep {
                queries: (0..shape.layers).map(|_| gauss(rng, shape.query_heads, shape.head_dim)).collect(),
                new_keys: (0..shape.layers).map(|_| gauss_vec(rng, width)).collect(),
                new_values: (0..shape.layers).map(|_| gauss_vec(rng, width)).collect(),
            })
            .collect(),
    }
}

pub fn queries<T: Scalar>(rng: &mut ChaCha8Rng, shape: &ModelShape) -> Vec<DenseMatrix<T>> {
    (0..shape.layers).map(|_| gauss(rng, shape.query_heads, shape.head_dim)).collect()
}

/// Layer codec with a random mask and random reconstructor weights; the value
/// basis is fitted on random samples so it is orthonormal.
pub fn random_layer<T: Scalar>(
    rng: &mut ChaCha8Rng,
    retention: f64,
    n: usize,
    d: usize,
    kv_heads: usize,
    policy: MeanPolicy,
    mlp_hidden: Option<usize>,
) -> LayerCodec<T> {
    let m = retained_len(retention, n);
    let mut mask = sample(rng, n, m).into_vec();
    mask.sort_unstable();
    let scale = 1.0 / (m as f64).sqrt();
    let heads = (0..kv_heads)
        .map(|_| match mlp_hidden {
            None => HeadReconstructor::Linear { w: gauss::<T>(rng, n, m).scale(T::of(scale)) },
            Some(h) => HeadReconstructor::Mlp2 {
                w1: gauss::<T>(rng, h, m).scale(T::of(scale)),
                b1: gauss_vec(rng, h),
                w2: gauss::<T>(rng, n, h).scale(T::of(1.0 / (h as f64).sqrt())),
                b2: gauss_vec(rng, n),
            },
        })
        .collect();
    let keys = KeyCodec::new(n, mask, heads).unwrap();
    let samples: Vec<Vec<DenseMatrix<T>>> = (0..3)
        .map(|_| (0..kv_heads).map(|_| gauss(rng, n, d)).collect())
        .collect();
    let (values, _) = fit_value_pca(&samples, retention, policy).unwrap();
    LayerCodec { retention, keys, values }
}

pub fn random_bundle<T: Scalar>(
    rng: &mut ChaCha8Rng,
    ratios: &[f64],
    n: usize,
    d: usize,
    kv_heads: usize,
    policy: MeanPolicy,
    mlp_hidden: Option<usize>,
) -> CodecBundle<T> {
    let layers = ratios
        .iter()
        .map(|&r| random_layer(rng, r, n, d, kv_heads, policy, mlp_hidden))
        .collect();
    CodecBundle::new(layers).unwrap()
}

/// Largest absolute difference relative to the reference's largest entry.
pub fn rel_err<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    kvcapsule::pipeline::max_relative_error(a, b)
}
