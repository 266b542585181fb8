//! Closed-form persistent-memory model of the KV cache, with and without
//! compression, and the vision-token count at which compression pays for its
//! parameters.
//!
//! All counts are bytes, summed over layers. The cache terms agree byte-exactly
//! with [`SegmentedCache::stored_bytes`](crate::kvmodel::SegmentedCache::stored_bytes)
//! for a batch of one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keycodec::ReconstructorKind;
use crate::pipeline::{make_schedule, PyramidSchedule};
use crate::valuecodec::MeanPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintParams {
    pub batch: u64,
    pub kv_heads: u64,
    /// Text tokens before the images.
    pub prompt_tokens: u64,
    /// Tokens per image.
    pub n: u64,
    pub images: u64,
    pub generated: u64,
    pub d_head: u64,
    pub kv_bytes: u64,
    /// One ratio per layer; its length sets the layer count.
    pub schedule: PyramidSchedule,
    pub mean_policy: MeanPolicy,
    pub kind: ReconstructorKind,
    /// Hidden width of the two-layer reconstructor; ignored for linear.
    pub hidden: u64,
}

impl FootprintParams {
    /// Planning defaults: 4 KV heads of width 128 in half precision, 196-token
    /// images, 36 layers ramping retention from 0.75 to 0.05 (mean 0.40).
    pub fn planning_default() -> Self {
        Self {
            batch: 1,
            kv_heads: 4,
            prompt_tokens: 0,
            n: 196,
            images: 1,
            generated: 0,
            d_head: 128,
            kv_bytes: 2,
            schedule: make_schedule(36, 0.75, 0.05).expect("valid default schedule"),
            mean_policy: MeanPolicy::PerSample,
            kind: ReconstructorKind::Linear,
            hidden: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.schedule.layers()
    }

    /// Vision tokens across all images.
    pub fn vision_tokens(&self) -> u64 {
        self.images * self.n
    }

    fn validate(&self) -> Result<()> {
        if self.images > 0 && self.n == 0 {
            return Err(Error::Config("images present but n = 0".into()));
        }
        if self.kind == ReconstructorKind::Mlp2 && self.hidden == 0 {
            return Err(Error::Config("mlp2 reconstructor needs hidden > 0".into()));
        }
        Ok(())
    }

    fn retained(&self) -> Vec<u64> {
        self.schedule
            .retained_lengths(self.n as usize)
            .into_iter()
            .map(|m| m as u64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BaseFootprint {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

/// One layer of the compressed footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LayerFootprint {
    /// Keys and values of text, retained vision rows and generated tokens.
    pub cache: u64,
    /// Per-sample value means.
    pub mean: u64,
    /// Value re-projection basis.
    pub basis: u64,
    /// Key reconstructor parameters.
    pub reconstructor: u64,
    /// Global value mean shipped with the codec.
    pub global_mean: u64,
}

impl LayerFootprint {
    pub fn overhead(&self) -> u64 {
        self.basis + self.reconstructor + self.global_mean
    }

    pub fn total(&self) -> u64 {
        self.cache + self.mean + self.overhead()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OursFootprint {
    pub per_layer: Vec<LayerFootprint>,
    /// Batch-dependent part: cache plus per-sample means.
    pub cache: u64,
    /// Parameters, independent of batch and sequence lengths.
    pub overhead: u64,
    pub total: u64,
}

/// `2·B·H·(c + k·n + t)·d·b` per layer.
pub fn footprint_base(p: &FootprintParams) -> Result<BaseFootprint> {
    p.validate()?;
    let tokens = p.prompt_tokens + p.images * p.n + p.generated;
    let layer = 2 * p.batch * p.kv_heads * tokens * p.d_head * p.kv_bytes;
    let per_layer = vec![layer; p.layers()];
    Ok(BaseFootprint {
        total: layer * p.layers() as u64,
        per_layer,
    })
}

/// Compressed cache `2·B·H·(c + k·m_ℓ + t)·d·b` per layer, with `m_ℓ = ⌈ℓ_r n⌉`,
/// plus codec parameters.
pub fn footprint_ours(p: &FootprintParams) -> Result<OursFootprint> {
    p.validate()?;
    let (h, d, b, n) = (p.kv_heads, p.d_head, p.kv_bytes, p.n);
    let per_layer: Vec<LayerFootprint> = p
        .retained()
        .into_iter()
        .map(|m| {
            let tokens = p.prompt_tokens + p.images * m + p.generated;
            let theta = match p.kind {
                ReconstructorKind::Linear => n * m,
                ReconstructorKind::Mlp2 => p.hidden * m + p.hidden + n * p.hidden + n,
            };
            let per_sample = p.mean_policy == MeanPolicy::PerSample;
            LayerFootprint {
                cache: 2 * p.batch * h * tokens * d * b,
                mean: if per_sample { p.batch * h * p.images * d * b } else { 0 },
                basis: h * m * n * b,
                reconstructor: h * theta * b,
                global_mean: if per_sample { 0 } else { h * d * b },
            }
        })
        .collect();
    let cache = per_layer.iter().map(|l| l.cache + l.mean).sum();
    let overhead = per_layer.iter().map(LayerFootprint::overhead).sum();
    Ok(OursFootprint {
        per_layer,
        cache,
        overhead,
        total: cache + overhead,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanRow {
    pub vision_tokens: u64,
    pub base: u64,
    pub ours: u64,
    /// `base − ours`; negative before the crossing.
    pub savings: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BreakEven {
    pub rows: Vec<PlanRow>,
    /// Smallest swept vision-token count with `ours < base`.
    pub crossing: Option<u64>,
}

impl BreakEven {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("vision_tokens,base_bytes,ours_bytes,savings_bytes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.vision_tokens, r.base, r.ours, r.savings));
        }
        s
    }
}

/// Evaluates both footprints at each total vision-token count in `sweep`,
/// varying the image count of `template` with `n` fixed.
pub fn break_even(template: &FootprintParams, sweep: &[u64]) -> Result<BreakEven> {
    if sweep.is_empty() {
        return Err(Error::param("empty vision-token sweep"));
    }
    if template.n == 0 {
        return Err(Error::Config("break-even sweep needs n > 0".into()));
    }
    if sweep.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("vision-token sweep must be strictly ascending"));
    }
    let mut rows = Vec::with_capacity(sweep.len());
    for &nv in sweep {
        if nv % template.n != 0 {
            return Err(Error::param(format!("{nv} vision tokens is not a multiple of n = {}", template.n)));
        }
        let p = FootprintParams {
            images: nv / template.n,
            ..template.clone()
        };
        let base = footprint_base(&p)?.total;
        let ours = footprint_ours(&p)?.total;
        rows.push(PlanRow {
            vision_tokens: nv,
            base,
            ours,
            savings: base as i64 - ours as i64,
        });
    }
    let crossing = rows.iter().find(|r| r.savings > 0).map(|r| r.vision_tokens);
    Ok(BreakEven { rows, crossing })
}

/// `n, 2n, …, images·n`.
pub fn image_sweep(n: u64, images: u64) -> Vec<u64> {
    (1..=images).map(|k| k * n).collect()
}
