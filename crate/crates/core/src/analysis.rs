//! Diagnostics over KV dumps and attention maps: inter-token redundancy,
//! top-k attention overlap across steps, feature-axis PCA ranks, attention
//! fidelity and compression sweeps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{column_means, cosine, singular_values, DenseMatrix, DEGENERATE_NORM};
use crate::keycodec::{train_key_codec, TrainConfig};
use crate::kvmodel::KvPair;
use crate::{retained_len, Scalar};

/// Mean off-diagonal cosine between rows, skipping rows with norm ≤ 1e-12.
/// Returns the mean and the number of skipped rows.
pub fn mean_offdiag_cosine<T: Scalar>(x: &DenseMatrix<T>) -> Result<(f64, usize)> {
    let rows: Vec<usize> = (0..x.rows())
        .filter(|&r| x.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt() > DEGENERATE_NORM)
        .collect();
    let skipped = x.rows() - rows.len();
    if rows.len() < 2 {
        return Err(Error::param(format!(
            "need at least 2 non-degenerate rows, have {} ({skipped} degenerate)",
            rows.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &a) in rows.iter().enumerate() {
        for &b in &rows[i + 1..] {
            sum += cosine(x.row(a), x.row(b)).expect("rows filtered");
        }
    }
    let pairs = rows.len() * (rows.len() - 1) / 2;
    Ok((sum / pairs as f64, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRedundancy {
    pub layer: usize,
    pub key_cosine: f64,
    pub value_cosine: f64,
    /// Rows excluded for near-zero norm, summed over heads and both tensors.
    pub degenerate_rows: usize,
}

/// Per-layer head-averaged mean off-diagonal cosine of keys and of values.
/// `dump[l][h]` holds the `n × d_head` vision keys and values of one head.
pub fn redundancy_stats<T: Scalar>(dump: &[Vec<KvPair<T>>]) -> Result<Vec<LayerRedundancy>> {
    if dump.is_empty() {
        return Err(Error::param("empty KV dump"));
    }
    dump.iter()
        .enumerate()
        .map(|(layer, heads)| {
            if heads.is_empty() {
                return Err(Error::param(format!("layer {layer} has no heads")));
            }
            let (mut k, mut v, mut bad) = (0.0, 0.0, 0);
            for p in heads {
                let (kc, kb) = mean_offdiag_cosine(&p.keys)?;
                let (vc, vb) = mean_offdiag_cosine(&p.values)?;
                k += kc;
                v += vc;
                bad += kb + vb;
            }
            let h = heads.len() as f64;
            Ok(LayerRedundancy {
                layer,
                key_cosine: k / h,
                value_cosine: v / h,
                degenerate_rows: bad,
            })
        })
        .collect()
}

/// Indices of the `count` largest entries, ties to the lower index.
pub fn top_indices(map: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.len()).collect();
    idx.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Overlap of top-`⌈fraction·n⌉` sets between every pair of steps:
/// entry `(i, j)` is `|Top(i) ∩ Top(j)| / |Top(i)|`.
pub fn topk_overlap(maps: &[Vec<f64>], fraction: f64) -> Result<DenseMatrix<f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("fraction {fraction} outside (0, 1]")));
    }
    if maps.len() < 2 {
        return Err(Error::param("topk_overlap needs at least 2 steps"));
    }
    let n = maps[0].len();
    if n == 0 || maps.iter().any(|m| m.len() != n) {
        return Err(Error::dim("topk_overlap", "every step needs the same nonzero vision length"));
    }
    let f = retained_len(fraction, n);
    let sets: Vec<Vec<bool>> = maps
        .iter()
        .map(|m| {
            let mut s = vec![false; n];
            top_indices(m, f).into_iter().for_each(|i| s[i] = true);
            s
        })
        .collect();
    Ok(DenseMatrix::from_fn(maps.len(), maps.len(), |i, j| {
        let common = sets[i].iter().zip(&sets[j]).filter(|(a, b)| **a && **b).count();
        common as f64 / f as f64
    }))
}

/// Head-averaged attention over `len` columns starting at `start`.
pub fn head_averaged_span(weights: &DenseMatrix<f64>, start: usize, len: usize) -> Result<Vec<f64>> {
    if start + len > weights.cols() || weights.rows() == 0 {
        return Err(Error::dim(
            "head_averaged_span",
            format!("columns {start}..{} of {}", start + len, weights.cols()),
        ));
    }
    let h = weights.rows() as f64;
    Ok((start..start + len)
        .map(|c| (0..weights.rows()).map(|r| weights.get(r, c)).sum::<f64>() / h)
        .collect())
}

/// Smallest `k` per level whose cumulative share of squared singular values
/// reaches the level. Each matrix is centered over tokens, then rows are pooled.
pub fn feature_rank<T: Scalar>(mats: &[&DenseMatrix<T>], levels: &[f64]) -> Result<Vec<usize>> {
    if mats.is_empty() {
        return Err(Error::param("empty dump"));
    }
    let d = mats[0].cols();
    let mut rows = Vec::new();
    for m in mats {
        if m.rows() < 2 {
            return Err(Error::param(format!("need at least 2 tokens, have {}", m.rows())));
        }
        if m.cols() != d {
            return Err(Error::dim("feature_rank", "feature widths differ"));
        }
        let mu = column_means(m);
        for r in 0..m.rows() {
            rows.extend(m.row(r).iter().zip(&mu).map(|(v, c)| v.f64() - c));
        }
    }
    let pooled = DenseMatrix::<f64>::from_vec_unchecked(rows.len() / d, d, rows);
    let energy: Vec<f64> = singular_values(&pooled)?.into_iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    levels
        .iter()
        .map(|&e| {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::param(format!("energy level {e} outside (0, 1]")));
            }
            if total == 0.0 {
                return Ok(0);
            }
            let mut acc = 0.0;
            for (k, s) in energy.iter().enumerate() {
                acc += s;
                if acc >= e * total * (1.0 - 1e-12) {
                    return Ok(k + 1);
                }
            }
            Ok(energy.len())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRanks {
    pub layer: usize,
    pub d_head: usize,
    pub levels: Vec<f64>,
    pub key_ranks: Vec<usize>,
    pub value_ranks: Vec<usize>,
}

impl LayerRanks {
    pub fn value_fractions(&self) -> Vec<f64> {
        self.value_ranks.iter().map(|&r| r as f64 / self.d_head as f64).collect()
    }
}

/// Feature-axis PCA ranks per layer for keys and values, heads pooled.
pub fn hidden_dim_rank<T: Scalar>(dump: &[Vec<KvPair<T>>], levels: &[f64]) -> Result<Vec<LayerRanks>> {
    if dump.is_empty() {
        return Err(Error::param("empty KV dump"));
    }
    dump.iter()
        .enumerate()
        .map(|(layer, heads)| {
            let keys: Vec<&DenseMatrix<T>> = heads.iter().map(|p| &p.keys).collect();
            let values: Vec<&DenseMatrix<T>> = heads.iter().map(|p| &p.values).collect();
            Ok(LayerRanks {
                layer,
                d_head: heads.first().map_or(0, |p| p.keys.cols()),
                levels: levels.to_vec(),
                key_ranks: feature_rank(&keys, levels)?,
                value_ranks: feature_rank(&values, levels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FidelityMetrics {
    pub cosine: f64,
    pub mse: f64,
}

/// Cosine of the flattened matrices and elementwise mean squared error.
pub fn attention_fidelity<T: Scalar>(p_ref: &DenseMatrix<T>, p_test: &DenseMatrix<T>) -> Result<FidelityMetrics> {
    if p_ref.shape() != p_test.shape() {
        return Err(Error::dim(
            "attention_fidelity",
            format!("{:?} vs {:?}", p_ref.shape(), p_test.shape()),
        ));
    }
    if p_ref == p_test {
        return Ok(FidelityMetrics { cosine: 1.0, mse: 0.0 });
    }
    let n = p_ref.data().len().max(1) as f64;
    let mse = p_ref.data().iter().zip(p_test.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>() / n;
    let cosine = cosine(p_ref.data(), p_test.data()).unwrap_or(0.0);
    Ok(FidelityMetrics { cosine, mse })
}

/// Fidelity over several layers: weights concatenated before comparison.
pub fn attention_fidelity_layers(p_ref: &[DenseMatrix<f64>], p_test: &[DenseMatrix<f64>]) -> Result<FidelityMetrics> {
    if p_ref.len() != p_test.len() {
        return Err(Error::dim("attention_fidelity", "layer counts differ"));
    }
    let flat = |ms: &[DenseMatrix<f64>]| ms.iter().flat_map(|m| m.data().iter().copied()).collect::<Vec<f64>>();
    for (a, b) in p_ref.iter().zip(p_test) {
        if a.shape() != b.shape() {
            return Err(Error::dim("attention_fidelity", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
    }
    let a = flat(p_ref);
    let b = flat(p_test);
    attention_fidelity(
        &DenseMatrix::from_vec_unchecked(1, a.len(), a),
        &DenseMatrix::from_vec_unchecked(1, b.len(), b),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    /// Compression ratio, `1 − retention`.
    pub ratio: f64,
    pub retention: f64,
    pub cosine: f64,
}

/// Trains a codec at retention `1 − ratio` for each ratio and records the
/// held-out reconstruction cosine reported by `trainer`.
pub fn compression_sweep<T, F>(samples: &[Vec<DenseMatrix<T>>], ratios: &[f64], mut trainer: F) -> Result<Vec<SweepPoint>>
where
    T: Scalar,
    F: FnMut(&[Vec<DenseMatrix<T>>], f64) -> Result<f64>,
{
    ratios
        .iter()
        .map(|&ratio| {
            if !(0.0..1.0).contains(&ratio) {
                return Err(Error::param(format!("compression ratio {ratio} outside [0, 1)")));
            }
            let retention = 1.0 - ratio;
            Ok(SweepPoint {
                ratio,
                retention,
                cosine: trainer(samples, retention)?,
            })
        })
        .collect()
}

/// Trainer for [`compression_sweep`] backed by the key codec.
pub fn key_codec_trainer<T: Scalar>(cfg: TrainConfig) -> impl FnMut(&[Vec<DenseMatrix<T>>], f64) -> Result<f64> {
    move |samples, retention| Ok(train_key_codec(samples, retention, &cfg)?.1.val_cosine)
}

/// True when no point exceeds the running minimum of earlier points by more than `band`.
pub fn is_nonincreasing_within(curve: &[SweepPoint], band: f64) -> bool {
    let mut best = f64::INFINITY;
    for p in curve {
        if p.cosine > best + band {
            return false;
        }
        best = best.min(p.cosine);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    type M = DenseMatrix<f64>;

    fn pair(k: M, v: M) -> KvPair<f64> {
        KvPair::new(k, v).unwrap()
    }

    #[test]
    fn redundancy_extremes() {
        let same = M::from_fn(4, 3, |_, c| c as f64 + 1.0);
        let orth = M::identity(3);
        let stats = redundancy_stats(&[vec![pair(same.select_rows(&[0, 1, 2]).unwrap(), orth)]]).unwrap();
        assert_abs_diff_eq!(stats[0].key_cosine, 1.0, epsilon = 1e-12);
        assert_eq!(stats[0].value_cosine, 0.0);
    }

    #[test]
    fn redundancy_skips_degenerate_rows() {
        let k = M::from_f64(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let (c, skipped) = mean_offdiag_cosine(&k).unwrap();
        assert_eq!(skipped, 1);
        assert_abs_diff_eq!(c, 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert!(mean_offdiag_cosine(&M::zeros(3, 2)).is_err());
    }

    #[test]
    fn redundancy_scale_invariant() {
        let k = M::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).sin());
        let scaled = M::from_fn(5, 3, |r, c| k.get(r, c) * (r as f64 + 0.5));
        let a = mean_offdiag_cosine(&k).unwrap().0;
        let b = mean_offdiag_cosine(&scaled).unwrap().0;
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn overlap_tables() {
        let a = vec![0.9, 0.8, 0.1, 0.0];
        let id = topk_overlap(&[a.clone(), a.clone()], 0.5).unwrap();
        assert_eq!(id.data(), &[1.0; 4]);
        let b = vec![0.0, 0.1, 0.8, 0.9];
        assert_eq!(topk_overlap(&[a, b], 0.5).unwrap().get(0, 1), 0.0);

        // n = 10, top-5 sets sharing two indices.
        let mut x = vec![0.0; 10];
        let mut y = vec![0.0; 10];
        for (i, v) in [0, 1, 2, 3, 4].iter().enumerate() {
            x[*v] = 10.0 - i as f64;
        }
        for (i, v) in [3, 4, 5, 6, 7].iter().enumerate() {
            y[*v] = 10.0 - i as f64;
        }
        assert_abs_diff_eq!(topk_overlap(&[x, y], 0.5).unwrap().get(0, 1), 0.4);
    }

    #[test]
    fn overlap_errors() {
        let a = vec![1.0, 2.0];
        assert!(topk_overlap(&[a.clone(), a.clone()], 0.0).is_err());
        assert!(topk_overlap(&[a.clone(), a.clone()], 1.5).is_err());
        assert!(topk_overlap(&[a.clone()], 0.5).is_err());
        assert!(topk_overlap(&[a, vec![1.0]], 0.5).is_err());
    }

    #[test]
    fn overlap_ties_to_lower_index() {
        assert_eq!(top_indices(&[1.0, 1.0, 1.0, 0.5], 2), vec![0, 1]);
    }

    #[test]
    fn rank_one_every_level() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let m = M::from_fn(4, 3, |r, c| u[r] * v[c]);
        assert_eq!(feature_rank(&[&m], &[0.9, 0.95, 0.99]).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn rank_errors() {
        assert!(feature_rank::<f64>(&[], &[0.9]).is_err());
        assert!(feature_rank(&[&M::zeros(1, 3)], &[0.9]).is_err());
        assert!(hidden_dim_rank::<f64>(&[], &[0.9]).is_err());
    }

    #[test]
    fn fidelity_examples() {
        let p = M::from_f64(1, 4, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(attention_fidelity(&p, &p).unwrap(), FidelityMetrics { cosine: 1.0, mse: 0.0 });
        let u = M::from_f64(1, 4, &[0.25; 4]).unwrap();
        let f = attention_fidelity(&p, &u).unwrap();
        assert_abs_diff_eq!(f.cosine, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.mse, 3.0 / 16.0, epsilon = 1e-12);
        assert!(attention_fidelity(&p, &M::zeros(2, 2)).is_err());
    }

    #[test]
    fn sweep_rejects_bad_ratio_and_reports_curve() {
        let samples: Vec<Vec<M>> = vec![];
        let curve = compression_sweep(&samples, &[0.0, 0.5], |_, r| Ok(r)).unwrap();
        assert_eq!(curve[1].retention, 0.5);
        assert!(is_nonincreasing_within(&curve, 0.0));
        assert!(compression_sweep(&samples, &[1.0], |_, r| Ok(r)).is_err());
    }

    #[test]
    fn nonincreasing_band() {
        let pt = |c| SweepPoint { ratio: 0.0, retention: 1.0, cosine: c };
        assert!(is_nonincreasing_within(&[pt(0.9), pt(0.91), pt(0.8)], 0.02));
        assert!(!is_nonincreasing_within(&[pt(0.9), pt(0.95)], 0.02));
    }
}
