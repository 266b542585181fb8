use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retained_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
}

/// Per-layer retention ratios, nonincreasing with depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSchedule {
    pub r0: f64,
    pub r1: f64,
    pub interpolation: Interpolation,
    ratios: Vec<f64>,
}

impl PyramidSchedule {
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn layers(&self) -> usize {
        self.ratios.len()
    }

    pub fn at(&self, layer: usize) -> f64 {
        self.ratios[layer]
    }

    pub fn mean_retention(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }

    /// Stored rows per layer for `n`-token images: `⌈ℓ_r n⌉`.
    pub fn retained_lengths(&self, n: usize) -> Vec<usize> {
        self.ratios.iter().map(|&r| retained_len(r, n)).collect()
    }

    /// Mean of `⌈ℓ_r n⌉ / n` over layers: the retention actually realized after rounding.
    pub fn effective_retention(&self, n: usize) -> f64 {
        self.retained_lengths(n).iter().sum::<usize>() as f64 / (n * self.ratios.len()) as f64
    }
}

/// `ℓ_r(ℓ) = r₀ + (r₁ − r₀)·ℓ/(L−1)`; a single layer gets `r₀`.
pub fn make_schedule(layers: usize, r0: f64, r1: f64) -> Result<PyramidSchedule> {
    if layers < 1 {
        return Err(Error::param("schedule needs at least one layer"));
    }
    if !(r1 > 0.0 && r1 <= r0 && r0 <= 1.0) {
        return Err(Error::param(format!("need 0 < r1 <= r0 <= 1, got r0 = {r0}, r1 = {r1}")));
    }
    let ratios = (0..layers)
        .map(|l| {
            if layers == 1 {
                r0
            } else {
                // Same ramp as r0 + (r1 - r0)·f, written to hit both endpoints exactly.
                let f = l as f64 / (layers - 1) as f64;
                r0 * (1.0 - f) + r1 * f
            }
        })
        .collect();
    Ok(PyramidSchedule {
        r0,
        r1,
        interpolation: Interpolation::Linear,
        ratios,
    })
}
