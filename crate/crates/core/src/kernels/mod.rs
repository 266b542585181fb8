//! Dense linear-algebra kernels: products, row softmax, cosine similarity and
//! truncated SVD. Storage is generic; every reduction accumulates in `f64`.

mod matrix;
pub(crate) mod svd;

pub use matrix::DenseMatrix;
pub(crate) use matrix::dot;
pub use svd::{
    orthonormal_completion, singular_values, symmetric_eigen, truncated_svd, SymmetricEigen,
    TruncatedSvd, DEFAULT_SVD_TOL, MAX_JACOBI_SWEEPS,
};

use crate::error::{Error, Result};
use crate::Scalar;

/// Norm below which a row is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// `a · b`.
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::dim(
            "matmul",
            format!("({}x{})·({}x{})", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let aip = aip.f64();
            if aip == 0.0 {
                continue;
            }
            for (slot, &bpj) in acc.iter_mut().zip(b.row(p)) {
                *slot += aip * bpj.f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::of(v)));
    }
    finite_or_err("matmul", DenseMatrix::from_vec_unchecked(m, n, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::dim(
            "matmul_bt",
            format!("({}x{})·({}x{})ᵀ", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let out = DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| T::of(dot(a.row(i), b.row(j))));
    finite_or_err("matmul_bt", out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows() != b.rows() {
        return Err(Error::dim(
            "matmul_at",
            format!("({}x{})ᵀ·({}x{})", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let (m, n) = (a.cols(), b.cols());
    let mut acc = vec![0.0f64; m * n];
    for p in 0..a.rows() {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &aval) in arow.iter().enumerate() {
            let aval = aval.f64();
            if aval == 0.0 {
                continue;
            }
            let slot = &mut acc[i * n..(i + 1) * n];
            for (s, &bv) in slot.iter_mut().zip(brow) {
                *s += aval * bv.f64();
            }
        }
    }
    let out = DenseMatrix::from_vec_unchecked(m, n, acc.into_iter().map(T::of).collect());
    finite_or_err("matmul_at", out)
}

fn finite_or_err<T: Scalar>(op: &'static str, m: DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric {
            op,
            detail: "non-finite output".into(),
        })
    }
}

/// Numerically stable row-wise softmax (per-row max subtraction, f64 exponentials).
pub fn softmax_rows<T: Scalar>(logits: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let mut out = Vec::with_capacity(logits.rows() * logits.cols());
    for r in 0..logits.rows() {
        out.extend(softmax_slice(logits.row(r))?.into_iter().map(T::of));
    }
    Ok(DenseMatrix::from_vec_unchecked(logits.rows(), logits.cols(), out))
}

/// Softmax of one row, returned in f64.
pub(crate) fn softmax_slice<T: Scalar>(row: &[T]) -> Result<Vec<f64>> {
    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "softmax_rows",
            detail: format!("non-finite logit at column {i}"),
        });
    }
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Cosine similarity between every pair of rows.
///
/// Rows with norm at or below [`DEGENERATE_NORM`] are rejected with the index of
/// the first such row.
pub fn pairwise_cosine<T: Scalar>(x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let norms: Vec<f64> = (0..x.rows()).map(|r| dot(x.row(r), x.row(r)).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| n <= DEGENERATE_NORM) {
        return Err(Error::DegenerateRow { row });
    }
    let n = x.rows();
    let mut out = DenseMatrix::<T>::zeros(n, n);
    for i in 0..n {
        out.set(i, i, T::one());
        for j in (i + 1)..n {
            let c = (dot(x.row(i), x.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out.set(i, j, T::of(c));
            out.set(j, i, T::of(c));
        }
    }
    Ok(out)
}

/// Cosine similarity of two vectors; `None` if either is degenerate.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na <= DEGENERATE_NORM || nb <= DEGENERATE_NORM {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-row mean over the token (row) axis.
pub fn column_means<T: Scalar>(x: &DenseMatrix<T>) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.f64();
        }
    }
    let n = x.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    type M = DenseMatrix<f64>;

    #[test]
    fn identity_times_a_is_a() {
        let a = M::from_f64(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&M::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = M::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = M::from_f64(2, 1, &[5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn product_shape_mismatch() {
        let a = M::zeros(2, 3);
        let b = M::zeros(4, 5);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
        assert!(matmul_bt(&a, &b).is_err());
        assert!(matmul_at(&a, &b).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let a = M::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = M::from_fn(5, 4, |r, c| (r as f64 - c as f64).sin());
        let direct = matmul(&a, &b.transpose()).unwrap();
        let bt = matmul_bt(&a, &b).unwrap();
        for (x, y) in direct.data().iter().zip(bt.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let c = M::from_fn(3, 2, |r, c| (r + 2 * c) as f64);
        let at = matmul_at(&a, &c).unwrap();
        let direct = matmul(&a.transpose(), &c).unwrap();
        for (x, y) in direct.data().iter().zip(at.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let p = softmax_rows(&M::zeros(1, 3)).unwrap();
        for &v in p.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let p = softmax_rows(&DenseMatrix::<f32>::from_f64(1, 2, &[1000.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert!(p.get(0, 1) >= 0.0 && p.get(0, 1) < 1e-30);
    }

    #[test]
    fn softmax_log_weights() {
        let logits = M::from_f64(1, 3, &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for (v, e) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = DenseMatrix::from_vec_unchecked(1, 2, vec![f64::NAN, 0.0]);
        assert!(softmax_rows(&x).unwrap_err().is_numeric());
    }

    #[test]
    fn cosine_cases() {
        let same = M::from_f64(2, 2, &[1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(pairwise_cosine(&same).unwrap().get(0, 1), 1.0, epsilon = 1e-12);
        let orth = M::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pairwise_cosine(&orth).unwrap().get(1, 0), 0.0);
        let x = M::from_f64(2, 2, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        let c = pairwise_cosine(&x).unwrap();
        assert_abs_diff_eq!(c.get(0, 1), 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn cosine_degenerate_row_named() {
        let x = M::from_f64(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(pairwise_cosine(&x), Err(Error::DegenerateRow { row: 2 })));
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(M::new(2, 2, vec![0.0; 3]).is_err());
        assert!(M::new(1, 1, vec![f64::INFINITY]).is_err());
    }
}
