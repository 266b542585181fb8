//! Deterministic synthetic KV tensors and query traces with controllable
//! redundancy.
//!
//! Keys are `α·1·bᵀ + A·Z` with a per-(layer, head) token mixing matrix `A`
//! (`n × (rank − 1)`) shared by all samples, so the keys of every sample lie in
//! the same `rank`-dimensional token-space span. `α` is calibrated per sample by
//! bisection so the mean inter-token cosine hits its target. Values are
//! `γ·1·cᵀ + N·Σ` with a flat or decaying feature spectrum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::mean_offdiag_cosine;
use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;
use crate::kvmodel::{KvPair, LayerKv};
use crate::pipeline::{QueryTrace, TraceStep};
use crate::Scalar;

/// Key/value inter-token cosine measured at a shallow, a middle and a deep layer
/// of a production vision-language model.
pub const LAYER_PROFILES: [(f64, f64); 3] = [(0.99, 0.35), (0.87, 0.40), (0.66, 0.30)];

/// Bisection steps used to calibrate mixing coefficients.
pub const CALIBRATION_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// Equal variance in every feature channel.
    #[default]
    Flat,
    /// Channel `j` scaled by `1 / (1 + j)`.
    Decaying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthProfile {
    pub seed: u64,
    pub n: usize,
    pub d_head: usize,
    pub kv_heads: usize,
    pub layers: usize,
    /// Query heads per KV head in generated traces.
    pub group_size: usize,
    /// Text-prefix tokens in generated prefills.
    pub text_tokens: usize,
    /// Target key inter-token cosine; one entry per layer, or one for all.
    pub key_cosine: Vec<f64>,
    pub value_cosine: f64,
    /// Token-space rank of the keys, `1 ≤ rank ≤ n`.
    pub key_rank: usize,
    pub value_spectrum: Spectrum,
    /// Optional token-space rank of the value noise.
    pub value_rank: Option<usize>,
    /// Query rotation per decode step, in radians.
    pub drift: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 32,
            d_head: 16,
            kv_heads: 2,
            layers: 3,
            group_size: 2,
            text_tokens: 4,
            key_cosine: LAYER_PROFILES.iter().map(|p| p.0).collect(),
            value_cosine: 0.35,
            key_rank: 32,
            value_spectrum: Spectrum::Flat,
            value_rank: None,
            drift: 0.15,
        }
    }
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        if [self.n, self.d_head, self.kv_heads, self.layers, self.group_size].contains(&0) {
            return Err(Error::param("profile counts must be >= 1"));
        }
        if self.key_cosine.len() != 1 && self.key_cosine.len() != self.layers {
            return Err(Error::param(format!(
                "{} key cosine targets for {} layers",
                self.key_cosine.len(),
                self.layers
            )));
        }
        for &t in self.key_cosine.iter().chain(std::iter::once(&self.value_cosine)) {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::param(format!("cosine target {t} outside [0, 1)")));
            }
        }
        if self.key_rank < 1 || self.key_rank > self.n {
            return Err(Error::param(format!("key rank {} outside [1, {}]", self.key_rank, self.n)));
        }
        if let Some(r) = self.value_rank {
            if r < 1 || r > self.n {
                return Err(Error::param(format!("value rank {r} outside [1, {}]", self.n)));
            }
        }
        if !self.drift.is_finite() {
            return Err(Error::param("drift must be finite"));
        }
        Ok(())
    }

    pub fn key_target(&self, layer: usize) -> f64 {
        if self.key_cosine.len() == 1 {
            self.key_cosine[0]
        } else {
            self.key_cosine[layer]
        }
    }

    pub fn query_heads(&self) -> usize {
        self.kv_heads * self.group_size
    }
}

/// Independent stream for one purpose; `parts` distinguish layer, head, sample.
fn stream(seed: u64, tag: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut x = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &p in parts {
        x = splitmix(x ^ p.wrapping_add(0x632b_e59b_d9b4_e019));
    }
    ChaCha8Rng::seed_from_u64(splitmix(x))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

const KEYS: u64 = 1;
const VALUES: u64 = 2;
const TEXT: u64 = 3;
const QUERIES: u64 = 4;
const GENERATED: u64 = 5;

/// `α·1·bᵀ + noise` with `α ≥ 0` chosen so the mean inter-token cosine is as
/// close to `target` as bisection over `[0, 1e4]` gets.
fn calibrate(base: &[f64], noise: &DenseMatrix<f64>, target: f64) -> Result<DenseMatrix<f64>> {
    let build = |a: f64| DenseMatrix::from_fn(noise.rows(), noise.cols(), |r, c| a * base[c] + noise.get(r, c));
    let measure = |a: f64| mean_offdiag_cosine(&build(a)).map(|x| x.0);
    let (mut lo, mut hi) = (0.0, 1e4);
    if measure(lo)? >= target {
        return Ok(build(lo));
    }
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        if measure(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(build(0.5 * (lo + hi)))
}

fn spectrum(kind: Spectrum, d: usize) -> Vec<f64> {
    match kind {
        Spectrum::Flat => vec![1.0; d],
        Spectrum::Decaying => (0..d).map(|j| 1.0 / (1.0 + j as f64)).collect(),
    }
}

/// Keys and values of one head for one sample.
fn head_kv(p: &SynthProfile, layer: usize, head: usize, sample: u64) -> Result<KvPair<f64>> {
    let (n, d) = (p.n, p.d_head);
    let (l, h) = (layer as u64, head as u64);

    let mut fixed = stream(p.seed, KEYS, &[l, h]);
    let base: Vec<f64> = (0..d).map(|_| fixed.sample(StandardNormal)).collect();
    let r = p.key_rank - 1;
    let mix = gaussian(&mut fixed, n, r);
    let mut rng = stream(p.seed, KEYS, &[l, h, sample + 1]);
    let z = gaussian(&mut rng, r, d);
    let scale = 1.0 / (r.max(1) as f64).sqrt();
    let noise = DenseMatrix::from_fn(n, d, |i, j| (0..r).map(|t| mix.get(i, t) * z.get(t, j)).sum::<f64>() * scale);
    let keys = if r == 0 {
        DenseMatrix::from_fn(n, d, |_, j| base[j])
    } else {
        calibrate(&base, &noise, p.key_target(layer))?
    };

    let mut vfixed = stream(p.seed, VALUES, &[l, h]);
    let vbase: Vec<f64> = (0..d).map(|_| vfixed.sample(StandardNormal)).collect();
    let sigma = spectrum(p.value_spectrum, d);
    let mut vrng = stream(p.seed, VALUES, &[l, h, sample + 1]);
    let raw = match p.value_rank {
        Some(vr) => {
            let vmix = gaussian(&mut vfixed, n, vr);
            let y = gaussian(&mut vrng, vr, d);
            let s = 1.0 / (vr as f64).sqrt();
            DenseMatrix::from_fn(n, d, |i, j| (0..vr).map(|t| vmix.get(i, t) * y.get(t, j)).sum::<f64>() * s)
        }
        None => gaussian(&mut vrng, n, d),
    };
    let vnoise = DenseMatrix::from_fn(n, d, |i, j| raw.get(i, j) * sigma[j]);
    let vb: Vec<f64> = vbase.iter().zip(&sigma).map(|(b, s)| b * s).collect();
    let values = calibrate(&vb, &vnoise, p.value_cosine)?;
    KvPair::new(keys, values)
}

/// Vision keys and values of one sample, `[layer][head]`, each `n × d_head`.
pub fn gen_visual_kv<T: Scalar>(profile: &SynthProfile, sample: u64) -> Result<Vec<Vec<KvPair<T>>>> {
    profile.validate()?;
    (0..profile.layers)
        .map(|l| {
            (0..profile.kv_heads)
                .map(|h| {
                    let p = head_kv(profile, l, h, sample)?;
                    Ok(KvPair {
                        keys: p.keys.cast(),
                        values: p.values.cast(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Per-layer key samples `[layer][sample][head]` for codec training.
pub fn key_dataset<T: Scalar>(profile: &SynthProfile, samples: u64) -> Result<Vec<Vec<Vec<DenseMatrix<T>>>>> {
    let all: Vec<Vec<Vec<KvPair<T>>>> = (0..samples).map(|s| gen_visual_kv(profile, s)).collect::<Result<_>>()?;
    Ok((0..profile.layers)
        .map(|l| all.iter().map(|s| s[l].iter().map(|p| p.keys.clone()).collect()).collect())
        .collect())
}

/// Per-layer value samples `[layer][sample][head]`.
pub fn value_dataset<T: Scalar>(profile: &SynthProfile, samples: u64) -> Result<Vec<Vec<Vec<DenseMatrix<T>>>>> {
    let all: Vec<Vec<Vec<KvPair<T>>>> = (0..samples).map(|s| gen_visual_kv(profile, s)).collect::<Result<_>>()?;
    Ok((0..profile.layers)
        .map(|l| all.iter().map(|s| s[l].iter().map(|p| p.values.clone()).collect()).collect())
        .collect())
}

/// Prefill input: random text prefix plus `images` vision segments, image `i`
/// drawn as sample `first_sample + i`.
pub fn gen_prefill<T: Scalar>(profile: &SynthProfile, first_sample: u64, images: usize) -> Result<Vec<LayerKv<T>>> {
    profile.validate()?;
    let vision: Vec<Vec<Vec<KvPair<T>>>> = (0..images as u64)
        .map(|i| gen_visual_kv(profile, first_sample + i))
        .collect::<Result<_>>()?;
    (0..profile.layers)
        .map(|l| {
            let text = (0..profile.kv_heads)
                .map(|h| {
                    let mut rng = stream(profile.seed, TEXT, &[l as u64, h as u64, first_sample]);
                    let k = gaussian(&mut rng, profile.text_tokens, profile.d_head);
                    let v = gaussian(&mut rng, profile.text_tokens, profile.d_head);
                    KvPair { keys: k.cast(), values: v.cast() }
                })
                .collect();
            Ok(LayerKv {
                text,
                images: vision.iter().map(|img| img[l].clone()).collect(),
            })
        })
        .collect()
}

/// Decode trace whose queries rotate by `drift` radians per step inside a
/// random plane (per layer and query head), with fresh KV rows per step.
pub fn gen_query_trace<T: Scalar>(profile: &SynthProfile, steps: usize) -> Result<QueryTrace<T>> {
    profile.validate()?;
    if steps < 1 {
        return Err(Error::param("trace needs at least one step"));
    }
    let d = profile.d_head;
    let hq = profile.query_heads();
    // Orthonormal pair (u, w) per layer and query head.
    let planes: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..profile.layers)
        .map(|l| {
            (0..hq)
                .map(|g| {
                    let mut rng = stream(profile.seed, QUERIES, &[l as u64, g as u64]);
                    let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let mut w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
                    let proj: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
                    w.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
                    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let w: Vec<f64> = w.iter().map(|x| x / nw).collect();
                    (u, w)
                })
                .collect()
        })
        .collect();
    let norm = (d as f64).sqrt();
    let trace = (0..steps)
        .map(|t| {
            let theta = profile.drift * t as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let queries = planes
                .iter()
                .map(|layer| {
                    DenseMatrix::from_fn(hq, d, |g, j| {
                        let (u, w) = &layer[g];
                        T::of(norm * (c * u[j] + s * w[j]))
                    })
                })
                .collect();
            let mut rng = stream(profile.seed, GENERATED, &[t as u64]);
            let mut row = |_| -> Vec<T> {
                (0..profile.kv_heads * d).map(|_| T::of(rng.sample(StandardNormal))).collect()
            };
            let new_keys = (0..profile.layers).map(&mut row).collect();
            let new_values = (0..profile.layers).map(&mut row).collect();
            TraceStep {
                queries,
                new_keys,
                new_values,
            }
        })
        .collect();
    Ok(QueryTrace { steps: trace })
}
