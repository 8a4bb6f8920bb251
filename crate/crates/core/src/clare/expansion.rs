use super::bank::argmin_oldest;
use super::{Discriminator, ErrorStats, LayerBank};
use crate::math::sqrt;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Smallest admissible standard deviation of a discriminator's error.
pub const MIN_STD: f64 = 1e-8;

/// Mean and population standard deviation (floored at [`MIN_STD`]).
pub fn finalize_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::Empty { what: "feature set" });
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(ErrorStats {
        mean,
        std: sqrt(var).max(MIN_STD),
    })
}

/// Mean standardized reconstruction error of `d` over the rows of `xs`.
pub fn zscore(d: &Discriminator, store: &ParamStore, layer: usize, index: usize, xs: &Tensor) -> Result<f64> {
    let stats = d.stats(layer, index)?;
    if xs.numel() == 0 {
        return Err(Error::Empty { what: "feature set" });
    }
    let mut acc = 0.0;
    for i in 0..xs.rows() {
        acc += (d.recon_error(store, xs.row(i))? - stats.mean) / stats.std;
    }
    Ok(acc / xs.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Expand,
    Link,
}

/// Expand on the first stage, or when every existing discriminator finds the
/// new features out of distribution (`z > gamma` for all).
pub fn decide_expansion(stage: usize, zscores: &[f64], gamma: f64) -> Decision {
    if stage <= 1 || zscores.iter().all(|&z| z > gamma) {
        Decision::Expand
    } else {
        Decision::Link
    }
}

/// Existing discriminator with the smallest mean error over `xs`; the new
/// auxiliary discriminator shares its adapter. Returns `(j*, adapter)`.
pub fn link_auxiliary(bank: &LayerBank, store: &ParamStore, xs: &Tensor) -> Result<(usize, usize)> {
    if bank.discriminators.is_empty() {
        return Err(Error::EmptyBank { layer: bank.layer });
    }
    if xs.numel() == 0 {
        return Err(Error::Empty { what: "feature set" });
    }
    let mut means: Vec<f64> = Vec::with_capacity(bank.discriminators.len());
    for d in &bank.discriminators {
        let mut acc = 0.0;
        for i in 0..xs.rows() {
            acc += d.recon_error(store, xs.row(i))?;
        }
        means.push(acc / xs.rows() as f64);
    }
    let j = argmin_oldest(&means).ok_or(Error::EmptyBank { layer: bank.layer })?;
    Ok((j, bank.links[j]))
}
