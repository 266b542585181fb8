//! Sequence-level PCA for visual values.
//!
//! Each KV head gets a basis `U` of shape `k × n` acting on the token axis.
//! Values are centered by a mean row `μ`, projected to `k` coefficient rows,
//! and restored by `Uᵀ ṽ + 1 μᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{column_means, matmul, matmul_at, truncated_svd, DenseMatrix, DEFAULT_SVD_TOL};
use crate::{retained_len, Scalar};

/// Where the centering vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanPolicy {
    /// Each cached sequence stores its own token mean.
    #[default]
    PerSample,
    /// One mean per head, fitted on the training set and shipped with the codec.
    Global,
}

impl MeanPolicy {
    pub fn code(self) -> u32 {
        match self {
            MeanPolicy::PerSample => 0,
            MeanPolicy::Global => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(MeanPolicy::PerSample),
            1 => Some(MeanPolicy::Global),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPca<T> {
    /// `k × n`, orthonormal rows.
    pub basis: DenseMatrix<T>,
    /// Present iff the policy is [`MeanPolicy::Global`].
    pub global_mean: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValuePca<T> {
    n: usize,
    d_head: usize,
    mean_policy: MeanPolicy,
    heads: Vec<HeadPca<T>>,
}

/// Per-head diagnostics from a fit.
#[derive(Debug, Clone)]
pub struct HeadFitReport {
    /// Numerical rank of the centered observation matrix.
    pub rank: usize,
    /// True when fewer than `k` directions came from data and the rest were padded.
    pub padded: bool,
    /// Sum of squared singular values beyond `k`: the optimal training error.
    pub tail_energy: f64,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PcaFitReport {
    pub heads: Vec<HeadFitReport>,
}

impl PcaFitReport {
    pub fn warnings(&self) -> Vec<String> {
        self.heads
            .iter()
            .enumerate()
            .filter(|(_, h)| h.padded)
            .map(|(i, h)| format!("head {i}: rank {} below basis size, padded with orthonormal complement", h.rank))
            .collect()
    }
}

impl<T: Scalar> ValuePca<T> {
    /// Assembles a codec from parts, checking shapes and orthonormality (1e-4).
    pub fn from_parts(n: usize, d_head: usize, mean_policy: MeanPolicy, heads: Vec<HeadPca<T>>) -> Result<Self> {
        let k = heads.first().map_or(0, |h| h.basis.rows());
        for (i, h) in heads.iter().enumerate() {
            if h.basis.rows() != k || h.basis.cols() != n || k == 0 || k > n {
                return Err(Error::validation(
                    0,
                    Some(i),
                    format!("value basis shape {:?}, expected k x {n}", h.basis.shape()),
                ));
            }
            let defect = crate::kernels::svd::orthonormality_defect(&h.basis);
            if defect > 1e-4 {
                return Err(Error::validation(
                    0,
                    Some(i),
                    format!("value basis rows not orthonormal (defect {defect:.3e})"),
                ));
            }
            match (&h.global_mean, mean_policy) {
                (Some(mu), MeanPolicy::Global) if mu.len() == d_head => {}
                (None, MeanPolicy::PerSample) => {}
                _ => {
                    return Err(Error::validation(
                        0,
                        Some(i),
                        "global mean must be present (length d_head) iff policy is global",
                    ))
                }
            }
        }
        Ok(Self {
            n,
            d_head,
            mean_policy,
            heads,
        })
    }

    /// Full basis `U = I`, per-sample mean.
    pub fn identity(n: usize, d_head: usize, kv_heads: usize) -> Self {
        Self {
            n,
            d_head,
            mean_policy: MeanPolicy::PerSample,
            heads: (0..kv_heads)
                .map(|_| HeadPca {
                    basis: DenseMatrix::identity(n),
                    global_mean: None,
                })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn retained(&self) -> usize {
        self.heads[0].basis.rows()
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn kv_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn mean_policy(&self) -> MeanPolicy {
        self.mean_policy
    }

    pub fn head(&self, h: usize) -> &HeadPca<T> {
        &self.heads[h]
    }

    pub fn heads(&self) -> &[HeadPca<T>] {
        &self.heads
    }

    fn check_head(&self, head: usize) -> Result<&HeadPca<T>> {
        self.heads.get(head).ok_or_else(|| {
            Error::dim("value codec", format!("head {head} of {}", self.heads.len()))
        })
    }

    /// `ṽ = U (v − 1μᵀ)` together with the `μ` used.
    pub fn compress_values(&self, head: usize, v: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, Vec<T>)> {
        let h = self.check_head(head)?;
        if v.shape() != (self.n, self.d_head) {
            return Err(Error::dim(
                "compress_values",
                format!("values {:?}, codec expects ({}, {})", v.shape(), self.n, self.d_head),
            ));
        }
        let mu: Vec<T> = match &h.global_mean {
            Some(mu) => mu.clone(),
            None => column_means(v).into_iter().map(T::of).collect(),
        };
        let centered = DenseMatrix::from_fn(self.n, self.d_head, |r, c| v.get(r, c) - mu[c]);
        Ok((matmul(&h.basis, &centered)?, mu))
    }

    /// `V̂ = Uᵀ ṽ + 1 μᵀ`.
    pub fn reconstruct_values(&self, head: usize, compressed: &DenseMatrix<T>, mu: &[T]) -> Result<DenseMatrix<T>> {
        let h = self.check_head(head)?;
        if compressed.shape() != (self.retained(), self.d_head) || mu.len() != self.d_head {
            return Err(Error::dim(
                "reconstruct_values",
                format!(
                    "compressed {:?} / mean {}, codec expects ({}, {}) / {}",
                    compressed.shape(),
                    mu.len(),
                    self.retained(),
                    self.d_head,
                    self.d_head
                ),
            ));
        }
        let mut out = matmul_at(&h.basis, compressed)?;
        for r in 0..out.rows() {
            for (x, &m) in out.row_mut(r).iter_mut().zip(mu) {
                *x += m;
            }
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.basis.rows() * h.basis.cols() + h.global_mean.as_ref().map_or(0, Vec::len))
            .sum()
    }
}

/// Fits one token-space basis per head.
///
/// `samples[s][h]` is the `n × d_head` value matrix of sample `s`, head `h`.
/// Every feature column of every centered sample is one observation of an
/// `n`-vector; the basis is the top-`⌈retention·n⌉` left singular directions of
/// the `n × (d_head · samples)` observation matrix.
pub fn fit_value_pca<T: Scalar>(
    samples: &[Vec<DenseMatrix<T>>],
    retention: f64,
    mean_policy: MeanPolicy,
) -> Result<(ValuePca<T>, PcaFitReport)> {
    let first = samples
        .first()
        .and_then(|s| s.first())
        .ok_or_else(|| Error::param("fit_value_pca needs at least one sample"))?;
    let (n, d) = first.shape();
    let heads = samples[0].len();
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::param(format!(
            "retention {retention} outside (0, 1]: ⌈ℓ_r n⌉ must lie in [1, n]"
        )));
    }
    for (s, sample) in samples.iter().enumerate() {
        if sample.len() != heads || sample.iter().any(|m| m.shape() != (n, d)) {
            return Err(Error::dim(
                "fit_value_pca",
                format!("sample {s} does not match {heads} heads of {n}x{d}"),
            ));
        }
    }
    let k = retained_len(retention, n);

    let mut fitted = Vec::with_capacity(heads);
    let mut reports = Vec::with_capacity(heads);
    for h in 0..heads {
        let global_mean = match mean_policy {
            MeanPolicy::Global => {
                let mut mu = vec![0.0; d];
                for sample in samples {
                    for (acc, m) in mu.iter_mut().zip(column_means(&sample[h])) {
                        *acc += m;
                    }
                }
                mu.iter_mut().for_each(|m| *m /= samples.len() as f64);
                Some(mu)
            }
            MeanPolicy::PerSample => None,
        };
        let cols = d * samples.len();
        let mut obs = vec![0.0f64; n * cols];
        for (s, sample) in samples.iter().enumerate() {
            let v = &sample[h];
            let mu = global_mean.clone().unwrap_or_else(|| column_means(v));
            for r in 0..n {
                for c in 0..d {
                    obs[r * cols + s * d + c] = v.get(r, c).f64() - mu[c];
                }
            }
        }
        let obs = DenseMatrix::<f64>::from_vec_unchecked(n, cols, obs);
        let svd = truncated_svd(&obs, k.min(n.min(cols)), DEFAULT_SVD_TOL)?;
        let mut basis_rows: Vec<Vec<f64>> = (0..svd.components.rows())
            .map(|r| svd.components.row(r).to_vec())
            .collect();
        // fewer observation columns than k: extend from the canonical basis
        crate::kernels::orthonormal_completion(&mut basis_rows, n, k);
        let basis = DenseMatrix::<T>::from_vec_unchecked(
            k,
            n,
            basis_rows.into_iter().flatten().map(T::of).collect(),
        );
        reports.push(HeadFitReport {
            rank: svd.rank,
            padded: svd.rank < k,
            tail_energy: svd.tail_energy(k),
            singular_values: svd.singular_values,
        });
        fitted.push(HeadPca {
            basis,
            global_mean: global_mean.map(|mu| mu.into_iter().map(T::of).collect()),
        });
    }
    let pca = ValuePca::from_parts(n, d, mean_policy, fitted)?;
    Ok((pca, PcaFitReport { heads: reports }))
}
