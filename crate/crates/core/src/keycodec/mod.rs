//! Selective key retention with sequence-axis reconstruction.
//!
//! A layer keeps `m = ⌈ℓ_r n⌉` of its `n` visual key rows (the mask, shared by
//! all KV heads) and restores the full sequence with a per-head map acting along
//! the token axis: either a single `n × m` matrix or a two-layer GELU MLP.

mod train;

pub use train::{
    evaluate_codec, gelu, gelu_grad, mask_loss, train_key_codec, EpochRecord, KeyTrainer,
    LossParts, Phase, TrainConfig, TrainReport, TrainingSchedule,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul, DenseMatrix};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructorKind {
    #[default]
    Linear,
    Mlp2,
}

impl ReconstructorKind {
    pub fn code(self) -> u32 {
        match self {
            ReconstructorKind::Linear => 0,
            ReconstructorKind::Mlp2 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ReconstructorKind::Linear),
            1 => Some(ReconstructorKind::Mlp2),
            _ => None,
        }
    }
}

/// Per-head reconstructor weights. All maps act on the token axis, one feature
/// column at a time.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadReconstructor<T> {
    /// `K̂ = W K̃`, `W: n × m`.
    Linear { w: DenseMatrix<T> },
    /// `K̂ = W₂ gelu(W₁ K̃ + b₁) + b₂`, `W₁: h × m`, `W₂: n × h`.
    Mlp2 {
        w1: DenseMatrix<T>,
        b1: Vec<T>,
        w2: DenseMatrix<T>,
        b2: Vec<T>,
    },
}

impl<T: Scalar> HeadReconstructor<T> {
    pub fn kind(&self) -> ReconstructorKind {
        match self {
            HeadReconstructor::Linear { .. } => ReconstructorKind::Linear,
            HeadReconstructor::Mlp2 { .. } => ReconstructorKind::Mlp2,
        }
    }

    fn io_shape(&self) -> (usize, usize) {
        match self {
            HeadReconstructor::Linear { w } => (w.cols(), w.rows()),
            HeadReconstructor::Mlp2 { w1, w2, .. } => (w1.cols(), w2.rows()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            HeadReconstructor::Linear { w } => w.rows() * w.cols(),
            HeadReconstructor::Mlp2 { w1, b1, w2, b2 } => {
                w1.rows() * w1.cols() + b1.len() + w2.rows() * w2.cols() + b2.len()
            }
        }
    }
}

/// Learned mask plus per-head reconstructors for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyCodec<T> {
    n: usize,
    mask: Vec<usize>,
    heads: Vec<HeadReconstructor<T>>,
}

impl<T: Scalar> KeyCodec<T> {
    /// Checks mask ordering and reconstructor shapes.
    pub fn new(n: usize, mask: Vec<usize>, heads: Vec<HeadReconstructor<T>>) -> Result<Self> {
        if mask.is_empty() || mask.len() > n {
            return Err(Error::validation(0, None, format!("mask length {} not in [1, {n}]", mask.len())));
        }
        if let Some(w) = mask.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                0,
                None,
                format!("mask not strictly increasing at position {}: {:?}", w + 1, mask),
            ));
        }
        if mask[mask.len() - 1] >= n {
            return Err(Error::validation(0, None, format!("mask index {} out of [0, {n})", mask[mask.len() - 1])));
        }
        let kind = heads.first().map(HeadReconstructor::kind);
        for (h, rec) in heads.iter().enumerate() {
            if Some(rec.kind()) != kind {
                return Err(Error::validation(0, Some(h), "mixed reconstructor kinds"));
            }
            if rec.io_shape() != (mask.len(), n) {
                return Err(Error::validation(
                    0,
                    Some(h),
                    format!("reconstructor maps {:?}, expected ({}, {n})", rec.io_shape(), mask.len()),
                ));
            }
            if let HeadReconstructor::Mlp2 { w1, b1, w2, b2 } = rec {
                let hidden = w1.rows();
                if hidden < mask.len() || w2.cols() != hidden || b1.len() != hidden || b2.len() != n {
                    return Err(Error::validation(0, Some(h), "mlp2 hidden shapes inconsistent"));
                }
            }
        }
        if heads.is_empty() {
            return Err(Error::validation(0, None, "no reconstructor heads"));
        }
        Ok(Self { n, mask, heads })
    }

    /// Codec that keeps every row and reconstructs by the identity.
    pub fn identity(n: usize, kv_heads: usize) -> Self {
        Self {
            n,
            mask: (0..n).collect(),
            heads: (0..kv_heads)
                .map(|_| HeadReconstructor::Linear { w: DenseMatrix::identity(n) })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn retained(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn kv_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn kind(&self) -> ReconstructorKind {
        self.heads[0].kind()
    }

    pub fn head(&self, h: usize) -> &HeadReconstructor<T> {
        &self.heads[h]
    }

    pub fn heads(&self) -> &[HeadReconstructor<T>] {
        &self.heads
    }

    /// The `n × m` expansion matrix of a linear codec.
    pub fn linear_weights(&self, head: usize) -> Option<&DenseMatrix<T>> {
        match self.heads.get(head)? {
            HeadReconstructor::Linear { w } => Some(w),
            HeadReconstructor::Mlp2 { .. } => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.heads.iter().map(HeadReconstructor::parameter_count).sum()
    }

    /// Row selection: output row `j` is input row `mask[j]`, copied bit-exactly.
    pub fn compress_keys(&self, k: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if k.rows() != self.n {
            return Err(Error::dim(
                "compress_keys",
                format!("{} key rows, codec trained for n = {}", k.rows(), self.n),
            ));
        }
        k.select_rows(&self.mask)
    }

    /// Restores `n` key rows from the `m` retained ones.
    pub fn reconstruct_keys(&self, head: usize, compressed: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let rec = self
            .heads
            .get(head)
            .ok_or_else(|| Error::dim("reconstruct_keys", format!("head {head} of {}", self.heads.len())))?;
        if compressed.rows() != self.mask.len() {
            return Err(Error::dim(
                "reconstruct_keys",
                format!("{} compressed rows, codec retains {}", compressed.rows(), self.mask.len()),
            ));
        }
        match rec {
            HeadReconstructor::Linear { w } => matmul(w, compressed),
            HeadReconstructor::Mlp2 { w1, b1, w2, b2 } => {
                let mut hidden = matmul(w1, compressed)?;
                for r in 0..hidden.rows() {
                    let b = b1[r].f64();
                    for x in hidden.row_mut(r) {
                        *x = T::of(gelu(x.f64() + b));
                    }
                }
                let mut out = matmul(w2, &hidden)?;
                for r in 0..out.rows() {
                    let b = b2[r];
                    for x in out.row_mut(r) {
                        *x += b;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// A mask produced by [`get_mask`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    /// Values multiplied into the key rows on the forward pass.
    pub forward: Vec<f64>,
    /// `sigmoid(logit / τ)`; drives gradients in both phases.
    pub soft: Vec<f64>,
    /// Top-`m` indices in ascending order.
    pub selected: Vec<usize>,
}

impl Mask {
    pub fn mean_soft(&self) -> f64 {
        self.soft.iter().sum::<f64>() / self.soft.len().max(1) as f64
    }
}

/// Indices of the `m` largest logits, ties to the lower index, returned ascending.
pub fn top_m(logits: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Soft phase: `sigmoid(logit/τ)` weights. Hard phase: 0/1 indicator of the top
/// `⌈ℓ_r n⌉` logits; gradients still flow through the soft weights.
pub fn get_mask(logits: &[f64], tau: f64, retention: f64, phase: Phase) -> Result<Mask> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature {tau} must be positive")));
    }
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::param(format!("retention {retention} outside (0, 1]")));
    }
    let n = logits.len();
    let m = crate::retained_len(retention, n);
    let soft: Vec<f64> = logits.iter().map(|&z| sigmoid(z / tau)).collect();
    let selected = top_m(logits, m);
    let forward = match phase {
        Phase::Soft => soft.clone(),
        Phase::Hard => {
            let mut f = vec![0.0; n];
            for &i in &selected {
                f[i] = 1.0;
            }
            f
        }
    };
    Ok(Mask {
        forward,
        soft,
        selected,
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    type M = DenseMatrix<f64>;

    #[test]
    fn identity_mask_compresses_to_input() {
        let k = M::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        let codec = KeyCodec::identity(4, 1);
        assert_eq!(codec.compress_keys(&k).unwrap(), k);
        assert_eq!(codec.reconstruct_keys(0, &k).unwrap(), k);
    }

    #[test]
    fn selected_rows_are_verbatim() {
        let k = DenseMatrix::<f32>::from_fn(4, 2, |r, c| 0.1 + r as f32 * 1.7 - c as f32 / 3.0);
        let w = DenseMatrix::zeros(4, 2);
        let codec = KeyCodec::new(4, vec![0, 2], vec![HeadReconstructor::Linear { w }]).unwrap();
        let c = codec.compress_keys(&k).unwrap();
        assert_eq!(c.row(0), k.row(0));
        assert_eq!(c.row(1), k.row(2));
        assert!(codec.compress_keys(&DenseMatrix::zeros(5, 2)).is_err());
        assert!(codec.reconstruct_keys(0, &DenseMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn mlp_zero_input_forward() {
        let w1 = M::from_f64(3, 2, &[0.5, -1.0, 2.0, 0.3, -0.7, 0.1]).unwrap();
        let b1 = vec![0.2, -0.4, 1.5];
        let w2 = M::from_f64(4, 3, &[1.0, 0.0, 2.0, -1.0, 0.5, 0.5, 0.3, 0.3, 0.3, 0.0, -2.0, 1.0]).unwrap();
        let b2 = vec![0.1, 0.2, 0.3, 0.4];
        let codec = KeyCodec::new(
            4,
            vec![1, 3],
            vec![HeadReconstructor::Mlp2 { w1, b1: b1.clone(), w2: w2.clone(), b2: b2.clone() }],
        )
        .unwrap();
        let out = codec.reconstruct_keys(0, &M::zeros(2, 2)).unwrap();
        let g: Vec<f64> = b1.iter().map(|&b| gelu(b)).collect();
        for r in 0..4 {
            let expected = (0..3).map(|j| w2.get(r, j) * g[j]).sum::<f64>() + b2[r];
            for c in 0..2 {
                assert_abs_diff_eq!(out.get(r, c), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mask_validation() {
        let lin = |m: usize| vec![HeadReconstructor::Linear { w: M::zeros(4, m) }];
        assert!(matches!(KeyCodec::new(4, vec![3, 1, 2], lin(3)), Err(Error::Validation { .. })));
        assert!(KeyCodec::new(4, vec![1, 1], lin(2)).is_err());
        assert!(KeyCodec::new(4, vec![1, 4], lin(2)).is_err());
        assert!(KeyCodec::new(4, vec![0, 1], lin(3)).is_err());
    }

    #[test]
    fn hard_mask_ties_go_low() {
        let m = get_mask(&[0.0; 6], 1.0, 0.5, Phase::Hard).unwrap();
        assert_eq!(m.selected, vec![0, 1, 2]);
        assert_eq!(m.forward, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_mask_picks_largest() {
        let m = get_mask(&[3.0, 1.0, 2.0], 1.0, 2.0 / 3.0, Phase::Hard).unwrap();
        assert_eq!(m.selected, vec![0, 2]);
    }

    #[test]
    fn soft_mask_approaches_indicator() {
        let logits = [2.0, -1.0, 0.5, -0.3];
        let m = get_mask(&logits, 1e-3, 0.5, Phase::Soft).unwrap();
        for (&s, &z) in m.soft.iter().zip(&logits) {
            let ind = if z > 0.0 { 1.0 } else { 0.0 };
            assert!((s - ind).abs() < 1e-3);
        }
        assert!(m.forward.iter().all(|&s| s > 0.0 && s < 1.0 || s == 0.0 || s == 1.0));
    }

    #[test]
    fn mask_parameter_checks() {
        assert!(get_mask(&[1.0], 0.0, 0.5, Phase::Soft).is_err());
        assert!(get_mask(&[1.0], 1.0, 1.5, Phase::Soft).is_err());
    }
}
