use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_vars: usize,
    pub n_latents: usize,
    pub length: usize,
    pub noise_std: f64,
    pub neg_fraction: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_vars: 20,
            n_latents: 3,
            length: 3000,
            noise_std: 0.1,
            neg_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Generated series together with the factors behind it.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub series: RawSeries,
    /// `n_latents` rows of length `length`.
    pub latents: Vec<Vec<f64>>,
    /// Mixing weights, `n_vars` rows of `n_latents`.
    pub weights: Vec<Vec<f64>>,
    pub negated: Vec<usize>,
}

pub fn synth_generate(params: &SynthParams) -> Result<RawSeries> {
    synth_generate_full(params).map(|o| o.series)
}

/// Sinusoidal latents mixed into noisy variables, a fraction of them with
/// negated weights.
pub fn synth_generate_full(params: &SynthParams) -> Result<SynthOutput> {
    let SynthParams {
        n_vars,
        n_latents,
        length,
        noise_std,
        neg_fraction,
        seed,
    } = *params;
    if n_latents == 0 || n_latents >= n_vars {
        return Err(Error::config(format!(
            "need 0 < n_latents < n_vars, got {n_latents} and {n_vars}"
        )));
    }
    if length == 0 || !(noise_std >= 0.0) || !(0.0..=1.0).contains(&neg_fraction) {
        return Err(Error::config("bad synthetic data parameters"));
    }
    let mut rng = rng_from(seed, &[stream::SYNTH]);

    // Log-spaced period bands keep every pair of periods clearly apart.
    let (lo, hi) = (10.0f64, 60.0f64);
    let band = (hi / lo).ln() / n_latents as f64;
    let latents: Vec<Vec<f64>> = (0..n_latents)
        .map(|j| {
            let u: f64 = rng.random_range(0.15..0.85);
            let period = lo * (band * (j as f64 + u)).exp();
            let phase = rng.random_range(0.0..TAU);
            (0..length).map(|t| (TAU * t as f64 / period + phase).sin()).collect()
        })
        .collect();

    let n_neg = (neg_fraction * n_vars as f64).round() as usize;
    let mut negated = sample(&mut rng, n_vars, n_neg).into_vec();
    negated.sort_unstable();
    let weights: Vec<Vec<f64>> = (0..n_vars)
        .map(|i| {
            let sign = if negated.contains(&i) { -1.0 } else { 1.0 };
            (0..n_latents).map(|_| sign * rng.random_range(0.5..=1.5)).collect()
        })
        .collect();

    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("finite sd");
    let mut data = Vec::with_capacity(length * n_vars);
    for t in 0..length {
        for w in &weights {
            let clean: f64 = w.iter().zip(&latents).map(|(w, z)| w * z[t]).sum();
            let eps = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(clean + eps);
        }
    }
    let values = Tensor::new(&[length, n_vars], data)?;
    let series = RawSeries::new(values, super::default_names(n_vars), "synthetic")?;
    Ok(SynthOutput {
        series,
        latents,
        weights,
        negated,
    })
}
