use serde::{Deserialize, Serialize};

use super::{CodecBundle, ModelShape};
use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;
use crate::valuecodec::MeanPolicy;
use crate::Scalar;

/// Which side of the vision cache is compressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Both,
    KeysOnly,
    ValuesOnly,
}

impl Ablation {
    pub fn keys(self) -> bool {
        matches!(self, Ablation::Both | Ablation::KeysOnly)
    }

    pub fn values(self) -> bool {
        matches!(self, Ablation::Both | Ablation::ValuesOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Full,
    Compressed(Ablation),
}

/// Keys and values of one head over one run of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair<T> {
    pub keys: DenseMatrix<T>,
    pub values: DenseMatrix<T>,
}

impl<T: Scalar> KvPair<T> {
    pub fn new(keys: DenseMatrix<T>, values: DenseMatrix<T>) -> Result<Self> {
        if keys.shape() != values.shape() {
            return Err(Error::dim("KvPair", format!("keys {:?} vs values {:?}", keys.shape(), values.shape())));
        }
        Ok(Self { keys, values })
    }

    pub fn empty(d_head: usize) -> Self {
        Self {
            keys: DenseMatrix::zeros(0, d_head),
            values: DenseMatrix::zeros(0, d_head),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Prefill input for one layer: `text[h]` and `images[i][h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    pub text: Vec<KvPair<T>>,
    pub images: Vec<Vec<KvPair<T>>>,
}

/// Stored vision tensors of one head for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionSegment<T> {
    pub keys: DenseMatrix<T>,
    pub values: DenseMatrix<T>,
    /// Per-sample value mean; set when values are compressed under the
    /// per-sample policy. Under the global policy the mean lives in the codec.
    pub mean: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    text: Vec<KvPair<T>>,
    /// `[image][head]`.
    vision: Vec<Vec<VisionSegment<T>>>,
    generated: Vec<KvPair<T>>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn text(&self, head: usize) -> &KvPair<T> {
        &self.text[head]
    }

    pub fn images(&self) -> &[Vec<VisionSegment<T>>] {
        &self.vision
    }

    pub fn generated(&self, head: usize) -> &KvPair<T> {
        &self.generated[head]
    }

    pub fn text_len(&self) -> usize {
        self.text.first().map_or(0, KvPair::len)
    }

    pub fn generated_len(&self) -> usize {
        self.generated.first().map_or(0, KvPair::len)
    }

    /// Stored vision key rows per head, summed over images.
    pub fn vision_key_rows(&self) -> usize {
        self.vision.iter().map(|img| img[0].keys.rows()).sum()
    }
}

/// Per-layer KV cache split into text, vision and generated segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedCache<T> {
    shape: ModelShape,
    n: usize,
    mode: CacheMode,
    mean_policy: MeanPolicy,
    layers: Vec<LayerCache<T>>,
}

/// Persistent cache size by segment, in bytes at `kv_bytes` per element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StorageBytes {
    pub text: u64,
    pub vision: u64,
    pub mean: u64,
    pub generated: u64,
}

impl StorageBytes {
    pub fn total(&self) -> u64 {
        self.text + self.vision + self.mean + self.generated
    }
}

impl<T: Scalar> SegmentedCache<T> {
    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    /// Tokens per image before compression.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn keys_compressed(&self) -> bool {
        matches!(self.mode, CacheMode::Compressed(a) if a.keys())
    }

    pub fn values_compressed(&self) -> bool {
        matches!(self.mode, CacheMode::Compressed(a) if a.values())
    }

    pub fn mean_policy(&self) -> MeanPolicy {
        self.mean_policy
    }

    pub fn layers(&self) -> &[LayerCache<T>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l]
    }

    pub fn image_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.vision.len())
    }

    /// Appends one generated token to `layer`. `new_k` and `new_v` hold the
    /// `H_kv` head vectors back to back (`H_kv · d_head` entries).
    pub fn append_token_kv(&mut self, layer: usize, new_k: &[T], new_v: &[T]) -> Result<()> {
        let d = self.shape.head_dim;
        let want = self.shape.kv_heads * d;
        if layer >= self.layers.len() {
            return Err(Error::dim("append_token_kv", format!("layer {layer} of {}", self.layers.len())));
        }
        if new_k.len() != want || new_v.len() != want {
            return Err(Error::dim(
                "append_token_kv",
                format!("got {} / {} entries, expected H_kv·d_head = {want}", new_k.len(), new_v.len()),
            ));
        }
        if new_k.iter().chain(new_v).any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "append_token_kv", detail: "non-finite entry".into() });
        }
        for (h, g) in self.layers[layer].generated.iter_mut().enumerate() {
            g.keys.push_row(&new_k[h * d..(h + 1) * d])?;
            g.values.push_row(&new_v[h * d..(h + 1) * d])?;
        }
        Ok(())
    }

    pub fn stored_bytes(&self) -> StorageBytes {
        let b = self.shape.kv_bytes as u64;
        let elems = |m: &DenseMatrix<T>| (m.rows() * m.cols()) as u64;
        let mut s = StorageBytes::default();
        for layer in &self.layers {
            for p in &layer.text {
                s.text += (elems(&p.keys) + elems(&p.values)) * b;
            }
            for seg in layer.vision.iter().flatten() {
                s.vision += (elems(&seg.keys) + elems(&seg.values)) * b;
                s.mean += seg.mean.as_ref().map_or(0, |m| m.len() as u64) * b;
            }
            for p in &layer.generated {
                s.generated += (elems(&p.keys) + elems(&p.values)) * b;
            }
        }
        s
    }
}

fn check_heads<T: Scalar>(pairs: &[KvPair<T>], shape: &ModelShape, what: &str, layer: usize) -> Result<usize> {
    if pairs.len() != shape.kv_heads {
        return Err(Error::dim("new_cache", format!("layer {layer} {what}: {} heads, expected {}", pairs.len(), shape.kv_heads)));
    }
    let len = pairs[0].len();
    for (h, p) in pairs.iter().enumerate() {
        if p.keys.shape() != (len, shape.head_dim) || p.values.shape() != (len, shape.head_dim) {
            return Err(Error::dim(
                "new_cache",
                format!(
                    "layer {layer} {what} head {h}: keys {:?} values {:?}, expected ({len}, {})",
                    p.keys.shape(),
                    p.values.shape(),
                    shape.head_dim
                ),
            ));
        }
    }
    Ok(len)
}

/// Builds a cache from prefill KV. In compressed mode each image segment is
/// compressed independently with its layer's codec; text is stored verbatim.
pub fn new_cache<T: Scalar>(
    shape: ModelShape,
    input: &[LayerKv<T>],
    codecs: Option<&CodecBundle<T>>,
    mode: CacheMode,
) -> Result<SegmentedCache<T>> {
    shape.validate()?;
    if input.len() != shape.layers {
        return Err(Error::dim("new_cache", format!("{} input layers, shape has {}", input.len(), shape.layers)));
    }
    let images = input[0].images.len();
    let mut n = None;
    for (l, layer) in input.iter().enumerate() {
        check_heads(&layer.text, &shape, "text", l)?;
        if layer.images.len() != images {
            return Err(Error::dim("new_cache", format!("layer {l} has {} images, layer 0 has {images}", layer.images.len())));
        }
        for img in &layer.images {
            let len = check_heads(img, &shape, "vision", l)?;
            if *n.get_or_insert(len) != len {
                return Err(Error::dim("new_cache", format!("layer {l}: image of {len} tokens, expected {}", n.unwrap_or(len))));
            }
        }
    }
    let n = n.unwrap_or(0);

    let bundle = match mode {
        CacheMode::Full => None,
        CacheMode::Compressed(_) => {
            let b = codecs.ok_or_else(|| Error::Config("compressed cache requires a codec bundle".into()))?;
            if b.layers().len() < shape.layers {
                return Err(Error::Config(format!("missing codec for layer {}", b.layers().len())));
            }
            if b.layers().len() > shape.layers {
                return Err(Error::Config(format!("bundle has {} layers, model has {}", b.layers().len(), shape.layers)));
            }
            if images > 0 && b.n() != n {
                return Err(Error::Config(format!("codecs trained for n = {}, cache has n = {n}", b.n())));
            }
            if b.kv_heads() != shape.kv_heads || b.d_head() != shape.head_dim {
                return Err(Error::Config(format!(
                    "codecs for {} heads × {} dims, model has {} × {}",
                    b.kv_heads(),
                    b.d_head(),
                    shape.kv_heads,
                    shape.head_dim
                )));
            }
            Some(b)
        }
    };
    let ablation = match mode {
        CacheMode::Full => None,
        CacheMode::Compressed(a) => Some(a),
    };

    let mut layers = Vec::with_capacity(shape.layers);
    for (l, layer) in input.iter().enumerate() {
        let codec = bundle.map(|b| &b.layers()[l]);
        let mut vision = Vec::with_capacity(images);
        for img in &layer.images {
            let mut segs = Vec::with_capacity(shape.kv_heads);
            for (h, p) in img.iter().enumerate() {
                let seg = match (codec, ablation) {
                    (Some(c), Some(a)) => {
                        let keys = if a.keys() { c.keys.compress_keys(&p.keys)? } else { p.keys.clone() };
                        let (values, mean) = if a.values() {
                            let (v, mu) = c.values.compress_values(h, &p.values)?;
                            (v, (c.values.mean_policy() == MeanPolicy::PerSample).then_some(mu))
                        } else {
                            (p.values.clone(), None)
                        };
                        VisionSegment { keys, values, mean }
                    }
                    _ => VisionSegment {
                        keys: p.keys.clone(),
                        values: p.values.clone(),
                        mean: None,
                    },
                };
                segs.push(seg);
            }
            vision.push(segs);
        }
        layers.push(LayerCache {
            text: layer.text.clone(),
            vision,
            generated: (0..shape.kv_heads).map(|_| KvPair::empty(shape.head_dim)).collect(),
        });
    }
    Ok(SegmentedCache {
        shape,
        n,
        mode,
        mean_policy: bundle.map_or(MeanPolicy::PerSample, |b| b.mean_policy()),
        layers,
    })
}
