use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{get_mask, top_m, HeadReconstructor, KeyCodec, Mask, ReconstructorKind};
use crate::error::{Error, Result};
use crate::kernels::{cosine, matmul, matmul_at, matmul_bt, DenseMatrix};
use crate::{retained_len, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight λ of the mask loss.
    pub mask_weight: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// First hard-phase epoch; `None` means half of `epochs`.
    pub hard_from: Option<usize>,
    pub seed: u64,
    pub kind: ReconstructorKind,
    /// MLP hidden width; `None` means `n`.
    pub hidden: Option<usize>,
    pub val_fraction: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1.0,
            mask_weight: 1.0,
            tau_start: 1.0,
            tau_end: 0.1,
            hard_from: None,
            seed: 0,
            kind: ReconstructorKind::Linear,
            hidden: None,
            val_fraction: 0.2,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.mask_weight >= 0.0) {
            return Err(Error::param(format!("mask loss weight {} must be >= 0", self.mask_weight)));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::param(format!(
                "temperature schedule {} -> {} must be positive and nonincreasing",
                self.tau_start, self.tau_end
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::param(format!("validation fraction {}", self.val_fraction)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::param(format!("clip norm {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            epochs: self.epochs,
            hard_from: self.hard_from.unwrap_or(self.epochs / 2).min(self.epochs),
            tau_start: self.tau_start,
            tau_end: self.tau_end,
        }
    }
}

/// Soft epochs anneal τ geometrically from `tau_start` to `tau_end`; hard epochs
/// hold `tau_end` and use straight-through gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub hard_from: usize,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl TrainingSchedule {
    pub fn at(&self, epoch: usize) -> (Phase, f64) {
        if epoch >= self.hard_from {
            return (Phase::Hard, self.tau_end);
        }
        let frac = if self.hard_from > 1 {
            epoch as f64 / (self.hard_from - 1) as f64
        } else {
            0.0
        };
        (Phase::Soft, self.tau_start * (self.tau_end / self.tau_start).powf(frac))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub mask_loss: f64,
    pub total: f64,
}

/// Mask loss: `KL(ℓ_r ‖ p) + (p − ℓ_r)²` on the mean soft activation `p`.
/// Zero exactly when `p = ℓ_r`. Returns the value and `d/dp`.
pub fn mask_loss(p: f64, retention: f64) -> (f64, f64) {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let r = retention;
    let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    let kl = xlogy(r, p) + xlogy(1.0 - r, 1.0 - p);
    let dkl = -r / p + (1.0 - r) / (1.0 - p);
    (kl + (p - r).powi(2), dkl + 2.0 * (p - r))
}

/// Trainable state for one layer: per-token mask logits plus full-width
/// reconstructor weights (`n` inputs), which are sliced to the retained columns
/// on export. With a hard mask, the dropped input rows are zero, so the full-width
/// map and the exported map agree exactly.
#[derive(Debug, Clone)]
pub struct KeyTrainer {
    n: usize,
    heads: usize,
    hidden: usize,
    kind: ReconstructorKind,
    retention: f64,
    /// `[logits (n) | head 0 | head 1 | …]`.
    params: Vec<f64>,
}

impl KeyTrainer {
    pub fn new(
        n: usize,
        heads: usize,
        retention: f64,
        kind: ReconstructorKind,
        hidden: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 || heads == 0 {
            return Err(Error::param("key trainer needs n >= 1 and at least one head"));
        }
        if !(retention > 0.0 && retention <= 1.0) {
            return Err(Error::param(format!("retention {retention} outside (0, 1]")));
        }
        let m = retained_len(retention, n);
        let hidden = hidden.unwrap_or(n);
        if kind == ReconstructorKind::Mlp2 && hidden < m {
            return Err(Error::param(format!("mlp2 hidden width {hidden} below retained length {m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7963_6f64_6563);
        let mut t = Self {
            n,
            heads,
            hidden,
            kind,
            retention,
            params: Vec::new(),
        };
        let mut params: Vec<f64> = (0..n).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..heads {
            match kind {
                ReconstructorKind::Linear => {
                    for r in 0..n {
                        for c in 0..n {
                            params.push(if r == c { 1.0 } else { 0.0 });
                        }
                    }
                }
                ReconstructorKind::Mlp2 => {
                    let s1 = 0.1 / (n as f64).sqrt();
                    for r in 0..hidden {
                        for c in 0..n {
                            let eye = if r == c { 1.0 } else { 0.0 };
                            params.push(eye + s1 * rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    params.extend(std::iter::repeat_n(0.0, hidden));
                    let s2 = 0.1 / (hidden as f64).sqrt();
                    for r in 0..n {
                        for c in 0..hidden {
                            let eye = if r == c { 1.0 } else { 0.0 };
                            params.push(eye + s2 * rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    params.extend(std::iter::repeat_n(0.0, n));
                }
            }
        }
        t.params = params;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn retained(&self) -> usize {
        retained_len(self.retention, self.n)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn logits(&self) -> &[f64] {
        &self.params[..self.n]
    }

    /// Number of leading parameters that belong to the mask logits.
    pub fn logit_count(&self) -> usize {
        self.n
    }

    fn block(&self) -> usize {
        match self.kind {
            ReconstructorKind::Linear => self.n * self.n,
            ReconstructorKind::Mlp2 => 2 * self.hidden * self.n + self.hidden + self.n,
        }
    }

    fn head_range(&self, h: usize) -> std::ops::Range<usize> {
        let start = self.n + h * self.block();
        start..start + self.block()
    }

    pub fn mask(&self, tau: f64, phase: Phase) -> Result<Mask> {
        get_mask(self.logits(), tau, self.retention, phase)
    }

    /// Forward pass of one head on `diag(mask) · keys`.
    fn forward(&self, h: usize, x: &DenseMatrix<f64>) -> Result<Forward> {
        let p = &self.params[self.head_range(h)];
        let (n, hid) = (self.n, self.hidden);
        match self.kind {
            ReconstructorKind::Linear => {
                let w = DenseMatrix::from_vec_unchecked(n, n, p.to_vec());
                let y = matmul(&w, x)?;
                Ok(Forward { y, pre: None })
            }
            ReconstructorKind::Mlp2 => {
                let (w1, rest) = p.split_at(hid * n);
                let (b1, rest) = rest.split_at(hid);
                let (w2, b2) = rest.split_at(n * hid);
                let w1 = DenseMatrix::from_vec_unchecked(hid, n, w1.to_vec());
                let mut a = matmul(&w1, x)?;
                for r in 0..hid {
                    a.row_mut(r).iter_mut().for_each(|v| *v += b1[r]);
                }
                let act = a.map(gelu);
                let w2 = DenseMatrix::from_vec_unchecked(n, hid, w2.to_vec());
                let mut y = matmul(&w2, &act)?;
                for r in 0..n {
                    y.row_mut(r).iter_mut().for_each(|v| *v += b2[r]);
                }
                Ok(Forward { y, pre: Some((a, act)) })
            }
        }
    }

    /// Loss on one sample (`keys[h]` is `n × d`) and its gradient with respect
    /// to every parameter. In the hard phase the logit gradient is the
    /// straight-through estimate through `sigmoid(logit/τ)`.
    pub fn loss_and_grad(&self, keys: &[DenseMatrix<f64>], mask: &Mask, tau: f64, lambda: f64) -> Result<(LossParts, Vec<f64>)> {
        if keys.len() != self.heads {
            return Err(Error::dim("loss_and_grad", format!("{} heads, trainer has {}", keys.len(), self.heads)));
        }
        let (n, hid) = (self.n, self.hidden);
        let d = keys[0].cols();
        let total = (self.heads * n * d) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut dmask = vec![0.0; n];
        let mut sse = 0.0;

        for (h, k) in keys.iter().enumerate() {
            if k.shape() != (n, d) {
                return Err(Error::dim("loss_and_grad", format!("head {h} keys {:?}", k.shape())));
            }
            let x = DenseMatrix::from_fn(n, d, |r, c| mask.forward[r] * k.get(r, c));
            let fwd = self.forward(h, &x)?;
            let resid = fwd.y.sub(k)?;
            sse += resid.frobenius_sq();
            let g = resid.scale(2.0 / total);
            let range = self.head_range(h);
            let p = &self.params[range.clone()];
            let gp = &mut grad[range];
            let dx = match (&self.kind, fwd.pre) {
                (ReconstructorKind::Linear, _) => {
                    let dw = matmul_bt(&g, &x)?;
                    gp.copy_from_slice(dw.data());
                    let w = DenseMatrix::from_vec_unchecked(n, n, p.to_vec());
                    matmul_at(&w, &g)?
                }
                (ReconstructorKind::Mlp2, Some((a, act))) => {
                    let w1 = DenseMatrix::from_vec_unchecked(hid, n, p[..hid * n].to_vec());
                    let w2 = DenseMatrix::from_vec_unchecked(n, hid, p[hid * n + hid..hid * n + hid + n * hid].to_vec());
                    let dw2 = matmul_bt(&g, &act)?;
                    let db2: Vec<f64> = (0..n).map(|r| g.row(r).iter().sum()).collect();
                    let dact = matmul_at(&w2, &g)?;
                    let da = DenseMatrix::from_fn(hid, d, |r, c| dact.get(r, c) * gelu_grad(a.get(r, c)));
                    let dw1 = matmul_bt(&da, &x)?;
                    let db1: Vec<f64> = (0..hid).map(|r| da.row(r).iter().sum()).collect();
                    let (s_w1, rest) = gp.split_at_mut(hid * n);
                    let (s_b1, rest) = rest.split_at_mut(hid);
                    let (s_w2, s_b2) = rest.split_at_mut(n * hid);
                    s_w1.copy_from_slice(dw1.data());
                    s_b1.copy_from_slice(&db1);
                    s_w2.copy_from_slice(dw2.data());
                    s_b2.copy_from_slice(&db2);
                    matmul_at(&w1, &da)?
                }
                (ReconstructorKind::Mlp2, None) => unreachable!("mlp2 forward keeps activations"),
            };
            for (r, dm) in dmask.iter_mut().enumerate() {
                *dm += dx.row(r).iter().zip(k.row(r)).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        let mse = sse / total;
        let p_mean = mask.mean_soft();
        let (lmask, dl_dp) = mask_loss(p_mean, self.retention);
        for i in 0..n {
            let ds = mask.soft[i] * (1.0 - mask.soft[i]) / tau;
            grad[i] = dmask[i] * ds + lambda * dl_dp * ds / n as f64;
        }
        Ok((
            LossParts {
                mse,
                mask_loss: lmask,
                total: mse + lambda * lmask,
            },
            grad,
        ))
    }

    /// Hard-mask reconstruction of one sample, as the exported codec would produce it.
    fn predict_hard(&self, keys: &[DenseMatrix<f64>]) -> Result<Vec<DenseMatrix<f64>>> {
        let mask = self.mask(1.0, Phase::Hard)?;
        keys.iter()
            .enumerate()
            .map(|(h, k)| {
                let x = DenseMatrix::from_fn(k.rows(), k.cols(), |r, c| mask.forward[r] * k.get(r, c));
                Ok(self.forward(h, &x)?.y)
            })
            .collect()
    }

    /// Slices the trained weights to the hard mask. `scale` undoes input
    /// standardization: keys were divided by it during training.
    pub fn export<T: Scalar>(&self, scale: f64) -> Result<KeyCodec<T>> {
        let m = self.retained();
        let mask = top_m(self.logits(), m);
        let (n, hid) = (self.n, self.hidden);
        let heads = (0..self.heads)
            .map(|h| {
                let p = &self.params[self.head_range(h)];
                match self.kind {
                    ReconstructorKind::Linear => {
                        let full = DenseMatrix::<f64>::from_vec_unchecked(n, n, p.to_vec());
                        Ok(HeadReconstructor::Linear { w: full.select_cols(&mask)?.cast() })
                    }
                    ReconstructorKind::Mlp2 => {
                        let w1 = DenseMatrix::<f64>::from_vec_unchecked(hid, n, p[..hid * n].to_vec());
                        let b1 = &p[hid * n..hid * n + hid];
                        let w2 = DenseMatrix::<f64>::from_vec_unchecked(n, hid, p[hid * n + hid..hid * n + hid + n * hid].to_vec());
                        let b2 = &p[hid * n + hid + n * hid..];
                        Ok(HeadReconstructor::Mlp2 {
                            w1: w1.select_cols(&mask)?.scale(1.0 / scale).cast(),
                            b1: b1.iter().map(|&v| T::of(v)).collect(),
                            w2: w2.scale(scale).cast(),
                            b2: b2.iter().map(|&v| T::of(v * scale)).collect(),
                        })
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        KeyCodec::new(n, mask, heads)
    }
}

struct Forward {
    y: DenseMatrix<f64>,
    /// MLP pre-activation and activation, kept for backprop.
    pre: Option<(DenseMatrix<f64>, DenseMatrix<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub tau: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_cosine: f64,
    pub mean_mask: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub train_samples: Vec<usize>,
    pub val_samples: Vec<usize>,
    pub val_mse: f64,
    pub val_cosine: f64,
    pub train_cosine: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,val_cosine,mean_mask\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9},{:.9}\n",
                e.epoch, e.train_mse, e.val_mse, e.val_cosine, e.mean_mask
            ));
        }
        out
    }
}

/// Mean per-token cosine and MSE between two sets of key matrices.
pub(crate) fn key_quality(pred: &[DenseMatrix<f64>], truth: &[DenseMatrix<f64>]) -> (f64, f64, usize) {
    let mut cos_sum = 0.0;
    let mut count = 0usize;
    let mut sse = 0.0;
    let mut elems = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for r in 0..t.rows() {
            if let Some(c) = cosine(p.row(r), t.row(r)) {
                cos_sum += c;
                count += 1;
            }
            sse += p.row(r).iter().zip(t.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            elems += t.cols();
        }
    }
    (cos_sum, sse / elems.max(1) as f64, count)
}

/// Trains mask and reconstructors for one layer.
///
/// `samples[s][h]` is sample `s`'s `n × d_head` key matrix for head `h`.
/// Samples are split into train/validation by a seeded shuffle; value PCA is
/// fitted separately. Keys are divided by their global RMS while training and
/// the scale is folded back into the exported weights.
pub fn train_key_codec<T: Scalar>(
    samples: &[Vec<DenseMatrix<T>>],
    retention: f64,
    cfg: &TrainConfig,
) -> Result<(KeyCodec<T>, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::param("train_key_codec: empty sample set"));
    }
    if samples.len() < 2 {
        return Err(Error::param("train_key_codec needs at least 2 samples for a train/validation split"));
    }
    let heads = samples[0].len();
    let (n, d) = samples[0]
        .first()
        .map(DenseMatrix::shape)
        .ok_or_else(|| Error::param("samples have no heads"))?;
    for (s, sample) in samples.iter().enumerate() {
        if sample.len() != heads || sample.iter().any(|k| k.shape() != (n, d)) {
            return Err(Error::dim("train_key_codec", format!("sample {s} shape differs from sample 0")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let sq: f64 = train_idx.iter().flat_map(|&s| &samples[s]).map(DenseMatrix::frobenius_sq).sum();
    let count = (train_idx.len() * heads * n * d) as f64;
    let scale = if sq > 0.0 { (sq / count).sqrt() } else { 1.0 };
    let scaled: Vec<Vec<DenseMatrix<f64>>> = samples
        .iter()
        .map(|s| s.iter().map(|k| k.cast::<f64>().scale(1.0 / scale)).collect())
        .collect();

    let mut trainer = KeyTrainer::new(n, heads, retention, cfg.kind, cfg.hidden, cfg.seed)?;
    let schedule = cfg.schedule();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (phase, tau) = schedule.at(epoch);
        train_idx.shuffle(&mut rng);
        let mut mse_sum = 0.0;
        let mut mean_mask = 0.0;
        for &s in &train_idx {
            let mask = trainer.mask(tau, phase)?;
            let (loss, mut grad) = trainer.loss_and_grad(&scaled[s], &mask, tau, cfg.mask_weight)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let f = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
            for (p, g) in trainer.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            mse_sum += loss.mse;
            mean_mask += mask.mean_soft();
        }
        let (val_cos, val_mse) = evaluate(&trainer, &scaled, &val_idx)?;
        records.push(EpochRecord {
            epoch,
            phase,
            tau,
            train_mse: mse_sum / train_idx.len() as f64 * scale * scale,
            val_mse: val_mse * scale * scale,
            val_cosine: val_cos,
            mean_mask: mean_mask / train_idx.len() as f64,
        });
    }

    let codec = trainer.export::<T>(scale)?;
    let (val_cosine, val_mse) = evaluate_codec(&codec, &val_idx.iter().map(|&s| samples[s].clone()).collect::<Vec<_>>())?;
    let (train_cosine, _) = evaluate_codec(&codec, &train_idx.iter().map(|&s| samples[s].clone()).collect::<Vec<_>>())?;
    train_idx.sort_unstable();
    Ok((
        codec,
        TrainReport {
            epochs: records,
            train_samples: train_idx,
            val_samples: val_idx,
            val_mse,
            val_cosine,
            train_cosine,
        },
    ))
}

fn evaluate(trainer: &KeyTrainer, scaled: &[Vec<DenseMatrix<f64>>], idx: &[usize]) -> Result<(f64, f64)> {
    let mut cos = 0.0;
    let mut cnt = 0;
    let mut mse = 0.0;
    for &s in idx {
        let pred = trainer.predict_hard(&scaled[s])?;
        let (c, m, k) = key_quality(&pred, &scaled[s]);
        cos += c;
        cnt += k;
        mse += m;
    }
    Ok((cos / cnt.max(1) as f64, mse / idx.len().max(1) as f64))
}

/// Mean per-token cosine and mean squared error of compress→reconstruct on
/// the given samples (`samples[s][h]`, `n × d`).
pub fn evaluate_codec<T: Scalar>(codec: &KeyCodec<T>, samples: &[Vec<DenseMatrix<T>>]) -> Result<(f64, f64)> {
    let mut cos = 0.0;
    let mut cnt = 0;
    let mut mse = 0.0;
    for sample in samples {
        let mut pred = Vec::with_capacity(sample.len());
        for (h, k) in sample.iter().enumerate() {
            pred.push(codec.reconstruct_keys(h, &codec.compress_keys(k)?)?.cast::<f64>());
        }
        let truth: Vec<DenseMatrix<f64>> = sample.iter().map(DenseMatrix::cast).collect();
        let (c, m, k) = key_quality(&pred, &truth);
        cos += c;
        cnt += k;
        mse += m;
    }
    Ok((cos / cnt.max(1) as f64, mse / samples.len().max(1) as f64))
}
