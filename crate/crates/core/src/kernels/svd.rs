use crate::error::{Error, Result};
use crate::kernels::{dot, DenseMatrix};
use crate::Scalar;

/// Relative off-diagonal tolerance for the Jacobi eigensolver.
pub const DEFAULT_SVD_TOL: f64 = 1e-10;
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// Eigenvalues at or below `NULL_EIGEN_REL * λ_max` are treated as zero
/// (singular values below `1e-6 * σ_max`).
const NULL_EIGEN_REL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix, eigenvalues in nonincreasing order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Row `i` holds the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix given row-major.
pub fn symmetric_eigen(a: &[f64], n: usize, tol: f64) -> Result<SymmetricEigen> {
    if a.len() != n * n {
        return Err(Error::dim("symmetric_eigen", format!("{} entries for n = {n}", a.len())));
    }
    let mut m: Vec<f64> = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += m[p * n + q] * m[p * n + q];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while total > 0.0 && off(&m) > tol * total {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(Error::Numeric {
                op: "symmetric_eigen",
                detail: format!("no convergence after {sweeps} sweeps"),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower index first among equal eigenvalues
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Top-`k` left singular directions of a matrix.
#[derive(Debug, Clone)]
pub struct TruncatedSvd<T> {
    /// `k × rows`; row `i` is the `i`-th left singular vector.
    pub components: DenseMatrix<T>,
    /// All `min(rows, cols)` singular values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// Numerical rank; components past this index come from the orthonormal
    /// completion rather than from the data.
    pub rank: usize,
    pub sweeps: usize,
}

impl<T: Scalar> TruncatedSvd<T> {
    /// Sum of squared singular values past the first `k`.
    pub fn tail_energy(&self, k: usize) -> f64 {
        self.singular_values.iter().skip(k).map(|s| s * s).sum()
    }
}

/// Rank-`k` truncated SVD via Jacobi eigendecomposition of the smaller Gram matrix.
///
/// Components follow a fixed sign convention: the largest-magnitude entry of each
/// is nonnegative (ties resolved toward the lower index). Directions past the
/// numerical rank are filled deterministically by Gram–Schmidt against the
/// canonical basis.
pub fn truncated_svd<T: Scalar>(x: &DenseMatrix<T>, k: usize, tol: f64) -> Result<TruncatedSvd<T>> {
    let (r, c) = x.shape();
    if k < 1 || k > r.min(c) {
        return Err(Error::param(format!(
            "truncated_svd: k = {k} outside [1, {}]",
            r.min(c)
        )));
    }
    let xf = x.to_f64_vec();
    let row = |i: usize| &xf[i * c..(i + 1) * c];

    let (eig, left_from_gram) = if r <= c {
        let mut g = vec![0.0; r * r];
        for i in 0..r {
            for j in i..r {
                let v: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                g[i * r + j] = v;
                g[j * r + i] = v;
            }
        }
        (symmetric_eigen(&g, r, tol)?, true)
    } else {
        let mut g = vec![0.0; c * c];
        for p in 0..r {
            let xr = row(p);
            for i in 0..c {
                if xr[i] == 0.0 {
                    continue;
                }
                for j in i..c {
                    g[i * c + j] += xr[i] * xr[j];
                }
            }
        }
        for i in 0..c {
            for j in 0..i {
                g[i * c + j] = g[j * c + i];
            }
        }
        (symmetric_eigen(&g, c, tol)?, false)
    };

    let lambda_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let singular_values: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let is_signal = |l: f64| lambda_max > 0.0 && l > NULL_EIGEN_REL * lambda_max;

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        if !is_signal(eig.values[i]) {
            break;
        }
        let u = if left_from_gram {
            eig.vectors[i].clone()
        } else {
            let v = &eig.vectors[i];
            let sigma = singular_values[i];
            (0..r)
                .map(|p| row(p).iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / sigma)
                .collect()
        };
        match orthonormalize_against(&basis, u) {
            Some(u) => basis.push(u),
            None => break,
        }
    }
    let rank = basis.len();
    orthonormal_completion(&mut basis, r, k);

    let mut data = Vec::with_capacity(k * r);
    for mut u in basis {
        apply_sign_convention(&mut u);
        data.extend(u.into_iter().map(T::of));
    }
    Ok(TruncatedSvd {
        components: DenseMatrix::from_vec_unchecked(k, r, data),
        singular_values,
        rank,
        sweeps: eig.sweeps,
    })
}

/// All singular values of `x`, nonincreasing.
pub fn singular_values<T: Scalar>(x: &DenseMatrix<T>) -> Result<Vec<f64>> {
    let k = x.rows().min(x.cols());
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(truncated_svd(x, 1, DEFAULT_SVD_TOL)?.singular_values)
}

/// Two-pass modified Gram–Schmidt of `u` against an orthonormal set.
/// Returns `None` when the residual collapses.
fn orthonormalize_against(basis: &[Vec<f64>], mut u: Vec<f64>) -> Option<Vec<f64>> {
    let start: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    if start == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for b in basis {
            let proj: f64 = u.iter().zip(b).map(|(a, c)| a * c).sum();
            u.iter_mut().zip(b).for_each(|(a, c)| *a -= proj * c);
        }
    }
    let norm: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= 1e-6 * start {
        return None;
    }
    u.iter_mut().for_each(|a| *a /= norm);
    Some(u)
}

/// Extends an orthonormal set in `dim` dimensions to `target` vectors using the
/// canonical basis in index order.
pub fn orthonormal_completion(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut j = 0;
    while basis.len() < target && j < dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        j += 1;
        if let Some(u) = orthonormalize_against(basis, e) {
            if u.iter().map(|a| a * a).sum::<f64>() > 0.5 {
                basis.push(u);
            }
        }
    }
}

fn apply_sign_convention(u: &mut [f64]) {
    let mut best = 0;
    for (i, v) in u.iter().enumerate() {
        if v.abs() > u[best].abs() {
            best = i;
        }
    }
    if u.get(best).is_some_and(|&v| v < 0.0) {
        u.iter_mut().for_each(|a| *a = -*a);
    }
}

/// Max deviation of `rows · rowsᵀ` from the identity.
pub(crate) fn orthonormality_defect<T: Scalar>(m: &DenseMatrix<T>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.rows() {
        for j in i..m.rows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(m.row(i), m.row(j)) - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::matmul;
    use approx::assert_abs_diff_eq;

    type M = DenseMatrix<f64>;

    #[test]
    fn eigen_reconstructs_symmetric_matrix() {
        let a = [4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0];
        let e = symmetric_eigen(&a, 3, DEFAULT_SVD_TOL).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j]).sum();
                assert_abs_diff_eq!(v, a[i * 3 + j], epsilon = 1e-9);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn diagonal_svd() {
        let x = M::from_f64(3, 3, &[3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let svd = truncated_svd(&x, 2, DEFAULT_SVD_TOL).unwrap();
        assert_abs_diff_eq!(svd.singular_values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(svd.singular_values[1], 2.0, epsilon = 1e-12);
        assert_eq!(svd.components.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(svd.components.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        for (r, c) in [(4, 6), (6, 4), (5, 5)] {
            let x = M::from_fn(r, c, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7 + (i as f64 * 0.3).sin());
            let k = r.min(c);
            let svd = truncated_svd(&x, k, DEFAULT_SVD_TOL).unwrap();
            let u = &svd.components;
            let proj = matmul(&u.transpose(), &matmul(u, &x).unwrap()).unwrap();
            if r <= c {
                for (a, b) in proj.data().iter().zip(x.data()) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-6);
                }
            }
            assert!(orthonormality_defect(u) < 1e-10);
        }
    }

    #[test]
    fn zero_matrix_completes_canonically() {
        let svd = truncated_svd(&M::zeros(3, 4), 2, DEFAULT_SVD_TOL).unwrap();
        assert_eq!(svd.rank, 0);
        assert_eq!(svd.components.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(svd.components.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn k_out_of_range() {
        let x = M::identity(3);
        assert!(matches!(truncated_svd(&x, 0, 1e-10), Err(Error::Parameter(_))));
        assert!(matches!(truncated_svd(&x, 4, 1e-10), Err(Error::Parameter(_))));
    }

    #[test]
    fn sign_convention_largest_entry_nonnegative() {
        let x = M::from_fn(5, 3, |i, j| -((i + 1) as f64) * (j as f64 + 0.5));
        let svd = truncated_svd(&x, 2, DEFAULT_SVD_TOL).unwrap();
        for r in 0..2 {
            let row = svd.components.row(r);
            let best = row.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(best >= 0.0);
        }
    }
}
