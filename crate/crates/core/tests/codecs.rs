mod common;

use common::*;
use kvcapsule::keycodec::{get_mask, train_key_codec, Phase, TrainConfig};
use kvcapsule::kernels::{truncated_svd, DenseMatrix};
use kvcapsule::retained_len;
use kvcapsule::valuecodec::{fit_value_pca, MeanPolicy};
use kvcapsule::Matrix64;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn nalgebra_singular_values(x: &Matrix64) -> Vec<f64> {
    let m = DMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c));
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

proptest! {
    #[test]
    fn svd_matches_nalgebra(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
        let x: Matrix64 = gauss(&mut rng(seed), rows, cols);
        let ours = truncated_svd(&x, rows.min(cols), 1e-12).unwrap();
        for (a, b) in ours.singular_values.iter().zip(nalgebra_singular_values(&x)) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn pca_basis_is_orthonormal(seed in any::<u64>(), n in 2usize..16, d in 1usize..6, ratio in 0.05f64..=1.0) {
        let mut r = rng(seed);
        let samples: Vec<Vec<Matrix64>> = (0..2).map(|_| vec![gauss(&mut r, n, d)]).collect();
        let (pca, _) = fit_value_pca(&samples, ratio, MeanPolicy::PerSample).unwrap();
        let u = &pca.head(0).basis;
        prop_assert_eq!(u.rows(), retained_len(ratio, n));
        for i in 0..u.rows() {
            for j in 0..u.rows() {
                let dot: f64 = u.row(i).iter().zip(u.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hard_mask_keeps_exactly_m(logits in prop::collection::vec(-5.0f64..5.0, 1..40), ratio in 0.01f64..=1.0, tau in 0.05f64..2.0) {
        let mask = get_mask(&logits, tau, ratio, Phase::Hard).unwrap();
        let m = retained_len(ratio, logits.len());
        prop_assert_eq!(mask.selected.len(), m);
        prop_assert_eq!(mask.forward.iter().filter(|&&v| v == 1.0).count(), m);
        prop_assert!(mask.forward.iter().all(|&v| v == 0.0 || v == 1.0));
        let floor = mask.selected.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for (i, &l) in logits.iter().enumerate() {
            if !mask.selected.contains(&i) {
                prop_assert!(l <= floor);
            }
        }
    }
}

#[test]
fn pca_error_is_tail_energy_with_global_mean() {
    let mut r = rng(21);
    let samples: Vec<Vec<Matrix64>> = (0..3).map(|_| vec![gauss(&mut r, 10, 4)]).collect();
    let (pca, rep) = fit_value_pca(&samples, 0.3, MeanPolicy::Global).unwrap();
    let mu = pca.head(0).global_mean.clone().unwrap();
    // oracle: center every sample by the pooled column mean, stack feature columns side by side
    let obs = DMatrix::from_fn(10, 12, |t, c| samples[c / 4][0].get(t, c % 4) - mu[c % 4]);
    let mut s: Vec<f64> = obs.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let tail: f64 = s.iter().skip(3).map(|v| v * v).sum();
    assert!((rep.heads[0].tail_energy - tail).abs() < 1e-9);
    let err: f64 = samples
        .iter()
        .map(|s| {
            let (c, m) = pca.compress_values(0, &s[0]).unwrap();
            pca.reconstruct_values(0, &c, &m).unwrap().sub(&s[0]).unwrap().frobenius_sq()
        })
        .sum();
    assert!((err - tail).abs() < 1e-9);
}

#[test]
fn exported_codec_reproduces_training_quality() {
    // keys of token rank 3 at n = 12: a 4-row mask can restore them
    let mut r = rng(5);
    let base: Matrix64 = gauss(&mut r, 12, 3);
    let samples: Vec<Vec<Matrix64>> = (0..12)
        .map(|_| {
            let z: Matrix64 = gauss(&mut r, 3, 4);
            vec![kvcapsule::kernels::matmul(&base, &z).unwrap()]
        })
        .collect();
    let cfg = TrainConfig { epochs: 400, seed: 3, ..TrainConfig::default() };
    let (codec, report) = train_key_codec(&samples, 4.0 / 12.0, &cfg).unwrap();
    assert_eq!(codec.retained(), 4);
    assert!(report.val_cosine > 0.99, "{}", report.val_cosine);
    let k = &samples[0][0];
    let back = codec.reconstruct_keys(0, &codec.compress_keys(k).unwrap()).unwrap();
    assert_eq!(back.shape(), k.shape());
    let cos = kvcapsule::kernels::cosine(back.data(), k.data()).unwrap();
    assert!(cos > 0.99, "{cos}");
}

#[test]
fn compressed_keys_are_the_masked_rows() {
    let mut r = rng(6);
    let layer = random_layer::<f64>(&mut r, 0.5, 10, 3, 1, MeanPolicy::PerSample, None);
    let k: DenseMatrix<f64> = gauss(&mut r, 10, 3);
    let c = layer.keys.compress_keys(&k).unwrap();
    for (row, &i) in layer.keys.mask().iter().enumerate() {
        assert_eq!(c.row(row), k.row(i));
    }
}
