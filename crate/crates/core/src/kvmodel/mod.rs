//! KV data model: model geometry, the segmented decode cache, and the
//! KVD1/KVC1 containers.

mod bundle;
mod cache;
pub mod format;

pub use bundle::{encode_codec_bundle, validate_codec_bundle, BundleMeta, CodecBundle, LayerCodec};
pub use cache::{
    new_cache, Ablation, CacheMode, KvPair, LayerCache, LayerKv, SegmentedCache, StorageBytes,
    VisionSegment,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention geometry shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub kv_heads: usize,
    pub query_heads: usize,
    pub head_dim: usize,
    /// Bytes per stored KV element.
    pub kv_bytes: usize,
}

impl ModelShape {
    pub fn new(layers: usize, kv_heads: usize, query_heads: usize, head_dim: usize, kv_bytes: usize) -> Result<Self> {
        let s = Self {
            layers,
            kv_heads,
            query_heads,
            head_dim,
            kv_bytes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.layers, self.kv_heads, self.query_heads, self.head_dim, self.kv_bytes].contains(&0) {
            return Err(Error::param(format!("model shape counts must be >= 1: {self:?}")));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::param(format!(
                "{} query heads not divisible by {} KV heads",
                self.query_heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    /// KV head serving query head `g`.
    pub fn kv_head_of(&self, g: usize) -> usize {
        g / self.group_size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rules() {
        let s = ModelShape::new(2, 2, 4, 8, 2).unwrap();
        assert_eq!(s.group_size(), 2);
        assert_eq!((0..4).map(|g| s.kv_head_of(g)).collect::<Vec<_>>(), [0, 0, 1, 1]);
        assert!(ModelShape::new(2, 3, 4, 8, 2).is_err());
        assert!(ModelShape::new(0, 1, 1, 8, 2).is_err());
    }
}
