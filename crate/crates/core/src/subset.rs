//! Variable subsets and the zero-fill-plus-mask encoding given to the imputer.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{shape_err, Tensor};

/// Number of available variables for fraction `k` of `n`: round half up,
/// at least one.
pub fn subset_size(n: usize, k: f64) -> Result<usize> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::config(format!("subset fraction k must be in (0, 1], got {k}")));
    }
    if n == 0 {
        return Err(Error::config("cannot draw a subset of zero variables"));
    }
    Ok(((k * n as f64 + 0.5).floor() as usize).clamp(1, n))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetMask {
    pub available: Vec<bool>,
    /// Seed of the draw; `SubsetMask::from_seed(n, k, seed_tag)` replays it.
    pub seed_tag: u64,
}

impl SubsetMask {
    /// Every variable available.
    pub fn full(n: usize) -> Self {
        Self {
            available: vec![true; n],
            seed_tag: 0,
        }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut available = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::config(format!(
                    "subset index {i} out of range for {n} variables"
                )));
            }
            available[i] = true;
        }
        if indices.is_empty() {
            return Err(Error::config("empty subset"));
        }
        Ok(Self { available, seed_tag: 0 })
    }

    pub fn from_seed(n: usize, k: f64, seed_tag: u64) -> Result<Self> {
        let mut rng = rng_from(seed_tag, &[]);
        let mut m = sample_subset(n, k, &mut rng)?;
        m.seed_tag = seed_tag;
        Ok(m)
    }

    pub fn n_vars(&self) -> usize {
        self.available.len()
    }

    /// S, the number of available variables.
    pub fn size(&self) -> usize {
        self.available.iter().filter(|a| **a).count()
    }

    pub fn is_available(&self, var: usize) -> bool {
        self.available[var]
    }

    /// Sorted indices of the available variables.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.n_vars()).filter(|&i| self.available[i]).collect()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.n_vars()).filter(|&i| !self.available[i]).collect()
    }
}

/// Uniform draw of `subset_size(n, k)` variables without replacement.
pub fn sample_subset<R: Rng + ?Sized>(n: usize, k: f64, rng: &mut R) -> Result<SubsetMask> {
    let s = subset_size(n, k)?;
    let mut available = vec![false; n];
    for i in sample(rng, n, s) {
        available[i] = true;
    }
    Ok(SubsetMask { available, seed_tag: 0 })
}

/// Imputer input for one subset.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetBatch {
    /// `(B, N, L)`, rows of missing variables exactly zero.
    pub inputs: Tensor,
    /// `(B, N, 1)`, 1 where the variable is available.
    pub mask_channel: Tensor,
    pub mask: SubsetMask,
    /// The unmasked lookback.
    pub target_full: Tensor,
}

/// Zeroes the rows of missing variables in a `(B, N, steps)` tensor.
pub fn mask_rows(x: &Tensor, mask: &SubsetMask) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] != mask.n_vars() {
        return Err(shape_err("apply_mask", s, &[mask.n_vars()]));
    }
    let steps = s[2];
    let mut out = x.clone();
    for (row, chunk) in out.data_mut().chunks_mut(steps).enumerate() {
        if !mask.available[row % mask.n_vars()] {
            chunk.fill(0.0);
        }
    }
    Ok(out)
}

pub fn mask_channel(batch: usize, mask: &SubsetMask) -> Tensor {
    let n = mask.n_vars();
    let data = (0..batch * n)
        .map(|i| if mask.available[i % n] { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[batch, n, 1], data).expect("mask channel shape")
}

pub fn apply_mask(batch: &WindowBatch, mask: &SubsetMask) -> Result<SubsetBatch> {
    Ok(SubsetBatch {
        inputs: mask_rows(&batch.lookback, mask)?,
        mask_channel: mask_channel(batch.len(), mask),
        mask: mask.clone(),
        target_full: batch.lookback.clone(),
    })
}
