//! Prefill and decode over the segmented cache.
//!
//! Four decode paths share one attention definition: a joint softmax over
//! `[text | vision | generated]` per query head, with query head `g` reading KV
//! head `⌊g / G⌋`.
//!
//! - baseline: full cache.
//! - reconstruct: restores `K̂`, `V̂` per image segment, then attends.
//! - fused: scores in compressed space expanded by `W`, probabilities
//!   re-projected through `Uᵀ`; the full-length vision tensors are never built.
//! - static: attends over the stored compressed rows directly.

mod generation;
mod schedule;

pub use generation::{run_generation, GenerationReport, QueryTrace, TraceStep};
pub use schedule::{make_schedule, Interpolation, PyramidSchedule};

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

pub use crate::kvmodel::Ablation;
use crate::error::{Error, Result};
use crate::kernels::{dot, softmax_slice, DenseMatrix};
use crate::keycodec::ReconstructorKind;
use crate::kvmodel::{new_cache, CacheMode, CodecBundle, LayerCache, LayerCodec, LayerKv, ModelShape, SegmentedCache, VisionSegment};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodePath {
    #[default]
    BaselineFull,
    Reconstruct,
    Fused,
    StaticCompressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DecodeConfig {
    pub path: DecodePath,
    pub ablation: Ablation,
    /// Score scale; `None` means `1/√d_head`.
    pub sigma: Option<f64>,
}

impl DecodeConfig {
    pub fn new(path: DecodePath) -> Self {
        Self {
            path,
            ..Self::default()
        }
    }

    pub fn sigma(&self, d_head: usize) -> f64 {
        self.sigma.unwrap_or(1.0 / (d_head as f64).sqrt())
    }
}

/// Bytes touched by one decode step, summed over layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TrafficReport {
    pub text_bytes: u64,
    pub vision_bytes: u64,
    /// Per-sample value means read from the cache.
    pub mean_bytes: u64,
    pub generated_bytes: u64,
    pub codec_bytes: u64,
    pub temporary_bytes: u64,
}

impl TrafficReport {
    /// Bytes read from the persistent cache.
    pub fn persistent(&self) -> u64 {
        self.text_bytes + self.vision_bytes + self.mean_bytes + self.generated_bytes
    }

    pub fn accumulate(&mut self, other: &TrafficReport) {
        self.text_bytes += other.text_bytes;
        self.vision_bytes += other.vision_bytes;
        self.mean_bytes += other.mean_bytes;
        self.generated_bytes += other.generated_bytes;
        self.codec_bytes += other.codec_bytes;
        self.temporary_bytes += other.temporary_bytes;
    }
}

/// Result of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    /// Per layer, `H_q × d_head`.
    pub outputs: Vec<DenseMatrix<T>>,
    /// Per layer, `H_q × (c + k·n + t)` attention weights in full-sequence
    /// coordinates. The static path places its weights at the retained positions.
    pub weights: Vec<DenseMatrix<f64>>,
    pub traffic: TrafficReport,
}

/// `max |a − b| / max |b|`, the norm-wise relative deviation of `a` from reference `b`.
pub fn max_relative_error<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> f64 {
    let scale = b.max_abs();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Builds a compressed cache with `codecs`, compressing both keys and values.
pub fn prefill_compressed<T: Scalar>(
    shape: ModelShape,
    input: &[LayerKv<T>],
    codecs: &CodecBundle<T>,
) -> Result<SegmentedCache<T>> {
    new_cache(shape, input, Some(codecs), CacheMode::Compressed(Ablation::Both))
}

/// One attended run of rows.
struct Block<'a, T: Clone> {
    keys: Cow<'a, DenseMatrix<T>>,
    values: Cow<'a, DenseMatrix<T>>,
    /// Added to every value row.
    mean: Option<&'a [T]>,
    /// Columns this block occupies in the weight matrix.
    span: usize,
    /// Column of each row within the span; `None` means rows map in order.
    positions: Option<&'a [usize]>,
}

fn scores<'a, T: Scalar>(k: &'a DenseMatrix<T>, q: &'a [T], sigma: f64) -> impl Iterator<Item = f64> + 'a {
    (0..k.rows()).map(move |r| dot(k.row(r), q) * sigma)
}

fn add_weighted<T: Scalar>(out: &mut [f64], p: &[f64], v: &DenseMatrix<T>) {
    for (r, &w) in p.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(v.row(r)) {
            *o += w * x.f64();
        }
    }
}

fn attend_blocks<T: Scalar>(q: &[T], blocks: &[Block<'_, T>], sigma: f64, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits: Vec<f64> = blocks.iter().flat_map(|b| scores(&b.keys, q, sigma)).collect();
    let p = softmax_slice(&logits)?;
    let mut out = vec![0.0; q.len()];
    let mut weights = vec![0.0; width];
    let (mut at, mut col) = (0, 0);
    for b in blocks {
        let rows = b.keys.rows();
        let pb = &p[at..at + rows];
        add_weighted(&mut out, pb, &b.values);
        if let Some(mu) = b.mean {
            let mass: f64 = pb.iter().sum();
            for (o, m) in out.iter_mut().zip(mu) {
                *o += mass * m.f64();
            }
        }
        match b.positions {
            Some(pos) => pos.iter().zip(pb).for_each(|(&j, &w)| weights[col + j] += w),
            None => weights[col..col + rows].copy_from_slice(pb),
        }
        at += rows;
        col += b.span;
    }
    Ok((out, weights))
}

fn check_queries<T: Scalar>(cache: &SegmentedCache<T>, queries: &[DenseMatrix<T>]) -> Result<()> {
    let s = cache.shape();
    if queries.len() != s.layers {
        return Err(Error::dim("decode", format!("{} query layers, model has {}", queries.len(), s.layers)));
    }
    for (l, q) in queries.iter().enumerate() {
        if q.shape() != (s.query_heads, s.head_dim) {
            return Err(Error::dim(
                "decode",
                format!("layer {l} queries {:?}, expected ({}, {})", q.shape(), s.query_heads, s.head_dim),
            ));
        }
    }
    Ok(())
}

fn weight_width<T: Scalar>(cache: &SegmentedCache<T>, layer: &LayerCache<T>) -> usize {
    layer.text_len() + cache.image_count() * cache.n() + layer.generated_len()
}

fn persistent_traffic<T: Scalar>(cache: &SegmentedCache<T>) -> TrafficReport {
    let s = cache.stored_bytes();
    TrafficReport {
        text_bytes: s.text,
        vision_bytes: s.vision,
        mean_bytes: s.mean,
        generated_bytes: s.generated,
        codec_bytes: 0,
        temporary_bytes: 0,
    }
}

fn codec_traffic<T: Scalar>(codec: &LayerCodec<T>, keys: bool, values: bool, b: u64) -> u64 {
    let k = if keys { codec.keys.parameter_count() } else { 0 };
    let v = if values { codec.values.parameter_count() } else { 0 };
    (k + v) as u64 * b
}

/// Runs query heads against per-KV-head block lists.
fn attend_layer<T: Scalar>(
    shape: &ModelShape,
    q: &DenseMatrix<T>,
    blocks: &[Vec<Block<'_, T>>],
    sigma: f64,
    width: usize,
) -> Result<(DenseMatrix<T>, DenseMatrix<f64>)> {
    let mut out = Vec::with_capacity(shape.query_heads * shape.head_dim);
    let mut weights = Vec::with_capacity(shape.query_heads * width);
    for g in 0..shape.query_heads {
        let (o, w) = attend_blocks(q.row(g), &blocks[shape.kv_head_of(g)], sigma, width)?;
        out.extend(o.into_iter().map(T::of));
        weights.extend(w);
    }
    Ok((
        DenseMatrix::from_vec_unchecked(shape.query_heads, shape.head_dim, out),
        DenseMatrix::from_vec_unchecked(shape.query_heads, width, weights),
    ))
}

fn text_block<T: Scalar>(layer: &LayerCache<T>, h: usize) -> Block<'_, T> {
    let p = layer.text(h);
    Block {
        keys: Cow::Borrowed(&p.keys),
        values: Cow::Borrowed(&p.values),
        mean: None,
        span: p.len(),
        positions: None,
    }
}

fn generated_block<T: Scalar>(layer: &LayerCache<T>, h: usize) -> Block<'_, T> {
    let p = layer.generated(h);
    Block {
        keys: Cow::Borrowed(&p.keys),
        values: Cow::Borrowed(&p.values),
        mean: None,
        span: p.len(),
        positions: None,
    }
}

fn value_mean<'a, T: Scalar>(seg: &'a VisionSegment<T>, codec: &'a LayerCodec<T>, h: usize) -> Result<&'a [T]> {
    seg.mean
        .as_deref()
        .or(codec.values.head(h).global_mean.as_deref())
        .ok_or_else(|| Error::Config("compressed values without a stored or global mean".into()))
}

/// Full-cache attention.
pub fn decode_step_baseline<T: Scalar>(
    cache: &SegmentedCache<T>,
    queries: &[DenseMatrix<T>],
    cfg: &DecodeConfig,
) -> Result<StepOutput<T>> {
    if cache.mode() != CacheMode::Full {
        return Err(Error::Config("baseline path requires a full cache".into()));
    }
    check_queries(cache, queries)?;
    let shape = cache.shape();
    let sigma = cfg.sigma(shape.head_dim);
    let mut outputs = Vec::with_capacity(shape.layers);
    let mut weights = Vec::with_capacity(shape.layers);
    let mut traffic = persistent_traffic(cache);
    for (l, layer) in cache.layers().iter().enumerate() {
        let width = weight_width(cache, layer);
        let blocks: Vec<Vec<Block<'_, T>>> = (0..shape.kv_heads)
            .map(|h| {
                let mut v = vec![text_block(layer, h)];
                for img in layer.images() {
                    v.push(Block {
                        keys: Cow::Borrowed(&img[h].keys),
                        values: Cow::Borrowed(&img[h].values),
                        mean: None,
                        span: cache.n(),
                        positions: None,
                    });
                }
                v.push(generated_block(layer, h));
                v
            })
            .collect();
        let (o, w) = attend_layer(shape, &queries[l], &blocks, sigma, width)?;
        traffic.temporary_bytes += (shape.query_heads * width * shape.kv_bytes) as u64;
        outputs.push(o);
        weights.push(w);
    }
    Ok(StepOutput { outputs, weights, traffic })
}

fn compressed_codecs<'a, T: Scalar>(
    cache: &SegmentedCache<T>,
    codecs: &'a CodecBundle<T>,
    ablation: Ablation,
    path: &str,
) -> Result<&'a CodecBundle<T>> {
    match cache.mode() {
        CacheMode::Compressed(a) if a == ablation => {}
        CacheMode::Compressed(a) => {
            return Err(Error::Config(format!(
                "{path} path asked for {ablation:?} but the cache was compressed as {a:?}"
            )))
        }
        CacheMode::Full => return Err(Error::Config(format!("{path} path requires a compressed cache"))),
    }
    let shape = cache.shape();
    if codecs.layers().len() != shape.layers || (cache.image_count() > 0 && codecs.n() != cache.n()) {
        return Err(Error::Config(format!(
            "codec bundle ({} layers, n = {}) does not match cache ({} layers, n = {})",
            codecs.layers().len(),
            codecs.n(),
            shape.layers,
            cache.n()
        )));
    }
    if codecs.kv_heads() != shape.kv_heads || codecs.d_head() != shape.head_dim {
        return Err(Error::Config("codec head geometry does not match cache".into()));
    }
    Ok(codecs)
}

/// Reconstructs each compressed vision segment, then attends.
pub fn decode_step_reconstruct<T: Scalar>(
    cache: &SegmentedCache<T>,
    queries: &[DenseMatrix<T>],
    codecs: &CodecBundle<T>,
    cfg: &DecodeConfig,
) -> Result<StepOutput<T>> {
    let codecs = compressed_codecs(cache, codecs, cfg.ablation, "reconstruct")?;
    check_queries(cache, queries)?;
    let shape = cache.shape();
    let (keys_c, values_c) = (cache.keys_compressed(), cache.values_compressed());
    let sigma = cfg.sigma(shape.head_dim);
    let b = shape.kv_bytes as u64;
    let mut outputs = Vec::with_capacity(shape.layers);
    let mut weights = Vec::with_capacity(shape.layers);
    let mut traffic = persistent_traffic(cache);
    for (l, layer) in cache.layers().iter().enumerate() {
        let codec = &codecs.layers()[l];
        let width = weight_width(cache, layer);
        let mut blocks = Vec::with_capacity(shape.kv_heads);
        for h in 0..shape.kv_heads {
            let mut v = vec![text_block(layer, h)];
            for img in layer.images() {
                let seg = &img[h];
                let keys = if keys_c {
                    Cow::Owned(codec.keys.reconstruct_keys(h, &seg.keys)?)
                } else {
                    Cow::Borrowed(&seg.keys)
                };
                let values = if values_c {
                    Cow::Owned(codec.values.reconstruct_values(h, &seg.values, value_mean(seg, codec, h)?)?)
                } else {
                    Cow::Borrowed(&seg.values)
                };
                v.push(Block {
                    keys,
                    values,
                    mean: None,
                    span: cache.n(),
                    positions: None,
                });
            }
            v.push(generated_block(layer, h));
            blocks.push(v);
        }
        let (o, w) = attend_layer(shape, &queries[l], &blocks, sigma, width)?;
        let rebuilt = (keys_c as usize + values_c as usize) * shape.kv_heads * cache.image_count() * cache.n() * shape.head_dim;
        traffic.codec_bytes += codec_traffic(codec, keys_c, values_c, b);
        traffic.temporary_bytes += (rebuilt + shape.query_heads * width) as u64 * b;
        outputs.push(o);
        weights.push(w);
    }
    Ok(StepOutput { outputs, weights, traffic })
}

/// Attention directly on compressed tensors. Requires a linear key codec.
///
/// Image logits are `W (K̃ q σ)`; the image output is `(Uᵀ-projected P) Ṽ + (ΣP) μ`.
pub fn decode_step_fused<T: Scalar>(
    cache: &SegmentedCache<T>,
    queries: &[DenseMatrix<T>],
    codecs: &CodecBundle<T>,
    cfg: &DecodeConfig,
) -> Result<StepOutput<T>> {
    if codecs.kind() != ReconstructorKind::Linear {
        return Err(Error::UnsupportedPath(
            "fused decoding needs a linear key reconstructor; mlp2 codecs must use the reconstruct path".into(),
        ));
    }
    let codecs = compressed_codecs(cache, codecs, cfg.ablation, "fused")?;
    check_queries(cache, queries)?;
    let shape = cache.shape();
    let (keys_c, values_c) = (cache.keys_compressed(), cache.values_compressed());
    let sigma = cfg.sigma(shape.head_dim);
    let b = shape.kv_bytes as u64;
    let n = cache.n();
    let d = shape.head_dim;
    let mut outputs = Vec::with_capacity(shape.layers);
    let mut weights = Vec::with_capacity(shape.layers);
    let mut traffic = persistent_traffic(cache);
    for (l, layer) in cache.layers().iter().enumerate() {
        let codec = &codecs.layers()[l];
        let m = codec.retained();
        let width = weight_width(cache, layer);
        let mut out = Vec::with_capacity(shape.query_heads * d);
        let mut wmat = Vec::with_capacity(shape.query_heads * width);
        for g in 0..shape.query_heads {
            let h = shape.kv_head_of(g);
            let q = queries[l].row(g);
            let text = layer.text(h);
            let gen = layer.generated(h);
            let mut logits: Vec<f64> = scores(&text.keys, q, sigma).collect();
            for img in layer.images() {
                let seg = &img[h];
                if keys_c {
                    let w = codec.keys.linear_weights(h).expect("linear kind checked above");
                    let s_comp: Vec<f64> = scores(&seg.keys, q, sigma).collect();
                    logits.extend((0..n).map(|r| w.row(r).iter().zip(&s_comp).map(|(a, s)| a.f64() * s).sum::<f64>()));
                } else {
                    logits.extend(scores(&seg.keys, q, sigma));
                }
            }
            logits.extend(scores(&gen.keys, q, sigma));
            let p = softmax_slice(&logits)?;

            let mut o = vec![0.0; d];
            let c = text.len();
            add_weighted(&mut o, &p[..c], &text.values);
            for (i, img) in layer.images().iter().enumerate() {
                let seg = &img[h];
                let p_img = &p[c + i * n..c + (i + 1) * n];
                if values_c {
                    let u = &codec.values.head(h).basis;
                    let a: Vec<f64> = (0..m).map(|r| dot_f64(u.row(r), p_img)).collect();
                    add_weighted(&mut o, &a, &seg.values);
                    let mass: f64 = p_img.iter().sum();
                    for (x, mu) in o.iter_mut().zip(value_mean(seg, codec, h)?) {
                        *x += mass * mu.f64();
                    }
                } else {
                    add_weighted(&mut o, p_img, &seg.values);
                }
            }
            let start = c + cache.image_count() * n;
            add_weighted(&mut o, &p[start..], &gen.values);
            out.extend(o.into_iter().map(T::of));
            wmat.extend(p);
        }
        let compressed_tmp = cache.image_count() * m * (keys_c as usize + values_c as usize);
        traffic.codec_bytes += codec_traffic(codec, keys_c, values_c, b);
        traffic.temporary_bytes += (shape.query_heads * (width + compressed_tmp)) as u64 * b;
        outputs.push(DenseMatrix::from_vec_unchecked(shape.query_heads, d, out));
        weights.push(DenseMatrix::from_vec_unchecked(shape.query_heads, width, wmat));
    }
    Ok(StepOutput { outputs, weights, traffic })
}

fn dot_f64<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y).sum()
}

/// Attends over the stored compressed rows with no reconstruction: retained
/// keys score directly and the value coefficient rows (plus stored mean) act as
/// values. Weights are reported at the retained token positions.
pub fn decode_step_static<T: Scalar>(
    cache: &SegmentedCache<T>,
    queries: &[DenseMatrix<T>],
    codecs: &CodecBundle<T>,
    cfg: &DecodeConfig,
) -> Result<StepOutput<T>> {
    let codecs = compressed_codecs(cache, codecs, Ablation::Both, "static")?;
    check_queries(cache, queries)?;
    let shape = cache.shape();
    let sigma = cfg.sigma(shape.head_dim);
    let mut outputs = Vec::with_capacity(shape.layers);
    let mut weights = Vec::with_capacity(shape.layers);
    let mut traffic = persistent_traffic(cache);
    for (l, layer) in cache.layers().iter().enumerate() {
        let codec = &codecs.layers()[l];
        let width = weight_width(cache, layer);
        let mut blocks = Vec::with_capacity(shape.kv_heads);
        for h in 0..shape.kv_heads {
            let mut v = vec![text_block(layer, h)];
            for img in layer.images() {
                let seg = &img[h];
                v.push(Block {
                    keys: Cow::Borrowed(&seg.keys),
                    values: Cow::Borrowed(&seg.values),
                    mean: Some(value_mean(seg, codec, h)?),
                    span: cache.n(),
                    positions: Some(codec.keys.mask()),
                });
            }
            v.push(generated_block(layer, h));
            blocks.push(v);
        }
        let (o, w) = attend_layer(shape, &queries[l], &blocks, sigma, width)?;
        let attended = layer.text_len() + layer.vision_key_rows() + layer.generated_len();
        traffic.temporary_bytes += (shape.query_heads * attended * shape.kv_bytes) as u64;
        outputs.push(o);
        weights.push(w);
    }
    Ok(StepOutput { outputs, weights, traffic })
}

/// Dispatches on `cfg.path`. Compressed paths require `codecs`.
pub fn decode_step<T: Scalar>(
    cache: &SegmentedCache<T>,
    queries: &[DenseMatrix<T>],
    codecs: Option<&CodecBundle<T>>,
    cfg: &DecodeConfig,
) -> Result<StepOutput<T>> {
    let need = || codecs.ok_or_else(|| Error::Config(format!("{:?} path requires codecs", cfg.path)));
    match cfg.path {
        DecodePath::BaselineFull => decode_step_baseline(cache, queries, cfg),
        DecodePath::Reconstruct => decode_step_reconstruct(cache, queries, need()?, cfg),
        DecodePath::Fused => decode_step_fused(cache, queries, need()?, cfg),
        DecodePath::StaticCompressed => decode_step_static(cache, queries, need()?, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvmodel::KvPair;
    use approx::assert_abs_diff_eq;

    type M = DenseMatrix<f64>;

    fn one_layer(text: KvPair<f64>, images: Vec<KvPair<f64>>) -> Vec<LayerKv<f64>> {
        vec![LayerKv {
            text: vec![text],
            images: images.into_iter().map(|p| vec![p]).collect(),
        }]
    }

    #[test]
    fn singleton_entry_returns_its_value() {
        let shape = ModelShape::new(1, 1, 1, 3, 4).unwrap();
        let k = M::from_f64(1, 3, &[0.3, -1.0, 2.0]).unwrap();
        let v = M::from_f64(1, 3, &[5.0, 6.0, 7.0]).unwrap();
        let input = one_layer(KvPair::new(k, v.clone()).unwrap(), vec![]);
        let cache = new_cache(shape, &input, None, CacheMode::Full).unwrap();
        let q = vec![M::from_f64(1, 3, &[1.0, 1.0, 1.0]).unwrap()];
        let out = decode_step_baseline(&cache, &q, &DecodeConfig::default()).unwrap();
        assert_eq!(out.outputs[0].row(0), v.row(0));
        assert_eq!(out.weights[0].data(), &[1.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let shape = ModelShape::new(1, 1, 1, 2, 4).unwrap();
        let k = M::from_f64(2, 2, &[1.0, 2.0, 1.0, 2.0]).unwrap();
        let v = M::from_f64(2, 2, &[0.0, 4.0, 2.0, 0.0]).unwrap();
        let input = one_layer(KvPair::empty(2), vec![KvPair::new(k, v).unwrap()]);
        let cache = new_cache(shape, &input, None, CacheMode::Full).unwrap();
        let q = vec![M::from_f64(1, 2, &[0.4, -0.1]).unwrap()];
        let out = decode_step_baseline(&cache, &q, &DecodeConfig::default()).unwrap();
        assert_abs_diff_eq!(out.weights[0].get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.outputs[0].get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.outputs[0].get(0, 1), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gqa_maps_query_heads_to_kv_heads() {
        let shape = ModelShape::new(1, 2, 4, 2, 4).unwrap();
        let pair = |x: f64| KvPair::new(M::from_f64(1, 2, &[x, x]).unwrap(), M::from_f64(1, 2, &[x, -x]).unwrap()).unwrap();
        let input = vec![LayerKv {
            text: vec![pair(1.0), pair(3.0)],
            images: vec![],
        }];
        let cache = new_cache(shape, &input, None, CacheMode::Full).unwrap();
        let q = vec![M::zeros(4, 2)];
        let out = decode_step_baseline(&cache, &q, &DecodeConfig::default()).unwrap();
        let firsts: Vec<f64> = (0..4).map(|g| out.outputs[0].get(g, 0)).collect();
        assert_eq!(firsts, [1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn mismatched_ablation_is_config_error() {
        let shape = ModelShape::new(1, 1, 1, 2, 4).unwrap();
        let kv = KvPair::new(M::from_fn(4, 2, |r, c| (r + c) as f64), M::from_fn(4, 2, |r, c| (r * c) as f64)).unwrap();
        let input = one_layer(KvPair::empty(2), vec![kv]);
        let bundle = CodecBundle::identity(1, 4, 2, 1);
        let cache = new_cache(shape, &input, Some(&bundle), CacheMode::Compressed(Ablation::ValuesOnly)).unwrap();
        let q = vec![M::zeros(1, 2)];
        let cfg = DecodeConfig {
            path: DecodePath::Reconstruct,
            ablation: Ablation::KeysOnly,
            sigma: None,
        };
        assert!(matches!(decode_step_reconstruct(&cache, &q, &bundle, &cfg), Err(Error::Config(_))));
        assert!(matches!(decode_step_baseline(&cache, &q, &cfg), Err(Error::Config(_))));
        assert!(matches!(decode_step_static(&cache, &q, &bundle, &cfg), Err(Error::Config(_))));
        let cfg = DecodeConfig { ablation: Ablation::ValuesOnly, ..cfg };
        assert!(decode_step_reconstruct(&cache, &q, &bundle, &cfg).is_ok());
    }

    #[test]
    fn relative_error_is_normwise() {
        let a = M::from_f64(1, 2, &[1.0, 0.1]).unwrap();
        let b = M::from_f64(1, 2, &[2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(max_relative_error(&a, &b), 0.5);
    }
}
