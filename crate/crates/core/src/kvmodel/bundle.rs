//! KVC1 codec bundles: per-layer key and value codecs plus metadata.
//!
//! Entries:
//! - `meta` `[8]`: version, L, n, d_head, H_kv, kind, mean policy, hidden width
//! - `schedule` `[L]`
//! - `layer{l}.mask` `[m]`
//! - `layer{l}.head{h}.U` `[m, n]`, `.mu` `[d_head]` (global policy only)
//! - `layer{l}.head{h}.W` `[n, m]`, or `.W1 .b1 .W2 .b2` for mlp2

use serde::Serialize;

use super::format::{decode, encode, EntryMap, FormatError, KvTensor, FORMAT_VERSION, KVC_MAGIC};
use crate::error::{Error, Result};
use crate::keycodec::{HeadReconstructor, KeyCodec, ReconstructorKind};
use crate::kernels::DenseMatrix;
use crate::valuecodec::{HeadPca, MeanPolicy, ValuePca};
use crate::{retained_len, Scalar};

/// Learned artifacts for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCodec<T> {
    pub retention: f64,
    pub keys: KeyCodec<T>,
    pub values: ValuePca<T>,
}

impl<T: Scalar> LayerCodec<T> {
    pub fn identity(n: usize, d_head: usize, kv_heads: usize) -> Self {
        Self {
            retention: 1.0,
            keys: KeyCodec::identity(n, kv_heads),
            values: ValuePca::identity(n, d_head, kv_heads),
        }
    }

    /// Compressed vision length for this layer.
    pub fn retained(&self) -> usize {
        self.keys.retained()
    }

    pub fn parameter_count(&self) -> usize {
        self.keys.parameter_count() + self.values.parameter_count()
    }
}

/// Codecs for every layer of one model, all trained for the same `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecBundle<T> {
    n: usize,
    d_head: usize,
    kv_heads: usize,
    layers: Vec<LayerCodec<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleMeta {
    pub version: u32,
    pub layers: usize,
    pub n: usize,
    pub d_head: usize,
    pub kv_heads: usize,
    pub kind: ReconstructorKind,
    pub mean_policy: MeanPolicy,
    /// mlp2 hidden width; 0 for linear codecs.
    pub hidden: usize,
    pub schedule: Vec<f64>,
}

fn relayer(e: Error, layer: usize) -> Error {
    match e {
        Error::Validation { head, detail, .. } => Error::Validation { layer, head, detail },
        other => other,
    }
}

impl<T: Scalar> CodecBundle<T> {
    /// Checks that every layer agrees on `n`, `d_head`, head count, key kind and
    /// mean policy, and that mask and basis lengths equal `⌈ℓ_r n⌉`.
    pub fn new(layers: Vec<LayerCodec<T>>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::param("codec bundle has no layers"))?;
        let (n, d_head, kv_heads) = (first.values.n(), first.values.d_head(), first.values.kv_heads());
        let kind = first.keys.kind();
        let policy = first.values.mean_policy();
        for (l, c) in layers.iter().enumerate() {
            if !(c.retention > 0.0 && c.retention <= 1.0) {
                return Err(Error::validation(l, None, format!("retention {} outside (0, 1]", c.retention)));
            }
            let m = retained_len(c.retention, n);
            if c.keys.n() != n || c.values.n() != n {
                return Err(Error::validation(l, None, format!("codec n differs from layer 0 ({n})")));
            }
            if c.values.d_head() != d_head || c.keys.kv_heads() != kv_heads || c.values.kv_heads() != kv_heads {
                return Err(Error::validation(l, None, "head count or head dim differs from layer 0"));
            }
            if c.keys.kind() != kind || c.values.mean_policy() != policy {
                return Err(Error::validation(l, None, "reconstructor kind or mean policy differs from layer 0"));
            }
            if c.keys.retained() != m {
                return Err(Error::validation(l, None, format!("mask has {} indices, expected {m}", c.keys.retained())));
            }
            if c.values.retained() != m {
                return Err(Error::validation(l, None, format!("value basis has {} rows, expected {m}", c.values.retained())));
            }
        }
        Ok(Self {
            n,
            d_head,
            kv_heads,
            layers,
        })
    }

    pub fn identity(layers: usize, n: usize, d_head: usize, kv_heads: usize) -> Self {
        Self {
            n,
            d_head,
            kv_heads,
            layers: (0..layers).map(|_| LayerCodec::identity(n, d_head, kv_heads)).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn layers(&self) -> &[LayerCodec<T>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Option<&LayerCodec<T>> {
        self.layers.get(l)
    }

    pub fn schedule(&self) -> Vec<f64> {
        self.layers.iter().map(|c| c.retention).collect()
    }

    pub fn kind(&self) -> ReconstructorKind {
        self.layers[0].keys.kind()
    }

    pub fn mean_policy(&self) -> MeanPolicy {
        self.layers[0].values.mean_policy()
    }

    pub fn hidden(&self) -> usize {
        match self.layers[0].keys.head(0) {
            HeadReconstructor::Linear { .. } => 0,
            HeadReconstructor::Mlp2 { w1, .. } => w1.rows(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerCodec::parameter_count).sum()
    }

    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            version: FORMAT_VERSION,
            layers: self.layers.len(),
            n: self.n,
            d_head: self.d_head,
            kv_heads: self.kv_heads,
            kind: self.kind(),
            mean_policy: self.mean_policy(),
            hidden: self.hidden(),
            schedule: self.schedule(),
        }
    }
}

pub fn encode_codec_bundle<T: Scalar>(bundle: &CodecBundle<T>) -> Result<Vec<u8>> {
    let meta = bundle.meta();
    let mut entries = vec![
        KvTensor::new(
            "meta",
            vec![8],
            [
                meta.version as usize,
                meta.layers,
                meta.n,
                meta.d_head,
                meta.kv_heads,
                meta.kind.code() as usize,
                meta.mean_policy.code() as usize,
                meta.hidden,
            ]
            .iter()
            .map(|&v| v as f32)
            .collect(),
        ),
        KvTensor::from_vector("schedule", &meta.schedule),
    ];
    for (l, c) in bundle.layers.iter().enumerate() {
        let mask: Vec<f64> = c.keys.mask().iter().map(|&i| i as f64).collect();
        entries.push(KvTensor::from_vector(format!("layer{l}.mask"), &mask));
        for h in 0..bundle.kv_heads {
            let p = format!("layer{l}.head{h}");
            let pca = c.values.head(h);
            entries.push(KvTensor::from_matrix(format!("{p}.U"), &pca.basis));
            if let Some(mu) = &pca.global_mean {
                entries.push(KvTensor::from_vector(format!("{p}.mu"), mu));
            }
            match c.keys.head(h) {
                HeadReconstructor::Linear { w } => entries.push(KvTensor::from_matrix(format!("{p}.W"), w)),
                HeadReconstructor::Mlp2 { w1, b1, w2, b2 } => {
                    entries.push(KvTensor::from_matrix(format!("{p}.W1"), w1));
                    entries.push(KvTensor::from_vector(format!("{p}.b1"), b1));
                    entries.push(KvTensor::from_matrix(format!("{p}.W2"), w2));
                    entries.push(KvTensor::from_vector(format!("{p}.b2"), b2));
                }
            }
        }
    }
    Ok(encode(KVC_MAGIC, &entries)?)
}

fn count(v: f32, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
        Ok(v as usize)
    } else {
        Err(Error::validation(0, None, format!("metadata {what} = {v} is not a count")))
    }
}

fn vector(t: &KvTensor, len: usize, layer: usize, head: Option<usize>) -> Result<Vec<f32>> {
    if t.shape != [len as u64] {
        return Err(Error::validation(layer, head, format!("{} has shape {:?}, expected [{len}]", t.name, t.shape)));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(layer, head, format!("{} has non-finite entries", t.name)));
    }
    Ok(t.data.clone())
}

fn matrix(t: &KvTensor, rows: Option<usize>, cols: usize, layer: usize, head: usize) -> Result<DenseMatrix<f32>> {
    let ok = t.shape.len() == 2 && rows.is_none_or(|r| t.shape[0] == r as u64) && t.shape[1] == cols as u64;
    if !ok {
        return Err(Error::validation(
            layer,
            Some(head),
            format!("{} has shape {:?}, expected [{}, {cols}]", t.name, t.shape, rows.map_or("h".into(), |r| r.to_string())),
        ));
    }
    t.to_matrix().map_err(|e| Error::validation(layer, Some(head), format!("{}: {e}", t.name)))
}

/// Parses a KVC1 container and checks every codec shape against its metadata.
pub fn validate_codec_bundle(bytes: &[u8]) -> Result<(CodecBundle<f32>, BundleMeta)> {
    let (magic, entries) = decode(bytes)?;
    if magic != KVC_MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let map = EntryMap::new(&entries);
    let meta = vector(map.require("meta")?, 8, 0, None)?;
    let version = count(meta[0], "version")?;
    if version != FORMAT_VERSION as usize {
        return Err(FormatError::UnsupportedVersion { version: version as u32 }.into());
    }
    let layers = count(meta[1], "layers")?;
    let n = count(meta[2], "n")?;
    let d_head = count(meta[3], "d_head")?;
    let kv_heads = count(meta[4], "kv_heads")?;
    let kind = ReconstructorKind::from_code(count(meta[5], "kind")? as u32)
        .ok_or_else(|| Error::validation(0, None, format!("unknown reconstructor kind {}", meta[5])))?;
    let policy = MeanPolicy::from_code(count(meta[6], "mean policy")? as u32)
        .ok_or_else(|| Error::validation(0, None, format!("unknown mean policy {}", meta[6])))?;
    let hidden = count(meta[7], "hidden")?;
    if layers == 0 || n == 0 || d_head == 0 || kv_heads == 0 {
        return Err(Error::validation(0, None, "metadata counts must be >= 1"));
    }
    let schedule = vector(map.require("schedule")?, layers, 0, None)?;

    let mut codecs = Vec::with_capacity(layers);
    for (l, &r) in schedule.iter().enumerate() {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::validation(l, None, format!("retention {r} outside (0, 1]")));
        }
        let m = retained_len(r as f64, n);
        let raw = vector(map.require(&format!("layer{l}.mask"))?, m, l, None)?;
        let mut mask = Vec::with_capacity(m);
        for &v in &raw {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= n {
                return Err(Error::validation(l, None, format!("mask index {v} not an integer in [0, {n})")));
            }
            mask.push(v as usize);
        }
        let mut recs = Vec::with_capacity(kv_heads);
        let mut pcas = Vec::with_capacity(kv_heads);
        for h in 0..kv_heads {
            let p = format!("layer{l}.head{h}");
            let basis = matrix(map.require(&format!("{p}.U"))?, Some(m), n, l, h)?;
            let global_mean = match policy {
                MeanPolicy::Global => Some(vector(map.require(&format!("{p}.mu"))?, d_head, l, Some(h))?),
                MeanPolicy::PerSample => None,
            };
            pcas.push(HeadPca { basis, global_mean });
            recs.push(match kind {
                ReconstructorKind::Linear => HeadReconstructor::Linear {
                    w: matrix(map.require(&format!("{p}.W"))?, Some(n), m, l, h)?,
                },
                ReconstructorKind::Mlp2 => HeadReconstructor::Mlp2 {
                    w1: matrix(map.require(&format!("{p}.W1"))?, Some(hidden), m, l, h)?,
                    b1: vector(map.require(&format!("{p}.b1"))?, hidden, l, Some(h))?,
                    w2: matrix(map.require(&format!("{p}.W2"))?, Some(n), hidden, l, h)?,
                    b2: vector(map.require(&format!("{p}.b2"))?, n, l, Some(h))?,
                },
            });
        }
        let keys = KeyCodec::new(n, mask, recs).map_err(|e| relayer(e, l))?;
        let values = ValuePca::from_parts(n, d_head, policy, pcas).map_err(|e| relayer(e, l))?;
        codecs.push(LayerCodec {
            retention: r as f64,
            keys,
            values,
        });
    }
    let bundle = CodecBundle::new(codecs)?;
    let meta = bundle.meta();
    Ok((bundle, meta))
}
