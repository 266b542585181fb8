//! Asymmetric compression of the visual KV cache of vision–language decoders.
//!
//! Keys of vision tokens are compressed by learned row selection and restored by
//! a small sequence-axis reconstructor; values are compressed by PCA over the
//! token axis and restored by linear re-projection. Decoding can reconstruct
//! before attending, or run a fused path that attends directly over the
//! compressed tensors using associativity of the re-projection.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the `f32` engine used for cached tensors.

pub mod analysis;
pub mod dump;
pub mod error;
pub mod kernels;
pub mod keycodec;
pub mod kvmodel;
pub mod memmodel;
pub mod pipeline;
pub mod synth;
pub mod valuecodec;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision dense matrix, the storage type for KV tensors.
pub type Matrix = kernels::DenseMatrix<f32>;
/// Double-precision dense matrix, used by oracles and offline fitting.
pub type Matrix64 = kernels::DenseMatrix<f64>;
pub type ValueCodec = valuecodec::ValuePca<f32>;
pub type KeyCodec = keycodec::KeyCodec<f32>;

/// Compressed length `⌈ratio · n⌉`, clamped to `[1, n]`.
///
/// A slack of `1e-4` absorbs rounding in ratios stored as `f32` (e.g. `0.4f32 · 10`
/// must give 4, not 5).
pub fn retained_len(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = (ratio * n as f64 - 1e-4).ceil();
    (raw.max(1.0) as usize).min(n)
}
