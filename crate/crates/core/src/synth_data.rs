//! Synthetic inputs and Gaussian-perturbation augmentations.
//!
//! All randomness comes from ChaCha8 streams derived from a single 64-bit run
//! seed: [`DATA_STREAM`] for the base samples, [`INIT_STREAM`] for parameter
//! initialization and `STEP_STREAM_BASE + step` for the augmentations drawn at
//! each training step. Normal variates use the ziggurat sampler of
//! `rand_distr::StandardNormal`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::dot;

pub type RunRng = ChaCha8Rng;

pub const DATA_STREAM: u64 = 0;
pub const INIT_STREAM: u64 = 1;
pub const STEP_STREAM_BASE: u64 = 1 << 32;

/// Identification written into output metadata.
pub const PRNG_ID: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64 + set_stream";
pub const NORMAL_SAMPLER_ID: &str = "ziggurat (rand_distr 0.5 StandardNormal)";

pub fn stream_rng(seed: u64, stream: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn step_rng(seed: u64, step: u64) -> RunRng {
    stream_rng(seed, STEP_STREAM_BASE + step)
}

pub fn standard_normal(rng: &mut RunRng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("orthogonal clusters need num_samples <= input_dim (got P={samples}, N={dim})")]
    TooManyClusters { samples: usize, dim: usize },
    #[error("input_dim and num_samples must be positive")]
    EmptySpec,
    #[error("augmentation sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    GaussianIid,
    OrthogonalClusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub input_dim: usize,
    pub num_samples: usize,
    pub mode: DataMode,
    pub aug_sigma: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            input_dim: 15,
            num_samples: 256,
            mode: DataMode::GaussianIid,
            aug_sigma: 0.1,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.input_dim == 0 || self.num_samples == 0 {
            return Err(DataError::EmptySpec);
        }
        if !(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0) {
            return Err(DataError::InvalidSigma(self.aug_sigma));
        }
        if self.mode == DataMode::OrthogonalClusters && self.num_samples > self.input_dim {
            return Err(DataError::TooManyClusters {
                samples: self.num_samples,
                dim: self.input_dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub base_index: usize,
}

/// Base samples for a run. Identical specs give bit-identical datasets.
pub fn make_dataset(spec: &DataSpec) -> Result<Vec<Vec<f64>>, DataError> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, DATA_STREAM);
    let n = spec.input_dim;
    let gaussian = |rng: &mut RunRng| -> Vec<f64> { (0..n).map(|_| standard_normal(rng)).collect() };
    match spec.mode {
        DataMode::GaussianIid => Ok((0..spec.num_samples).map(|_| gaussian(&mut rng)).collect()),
        DataMode::OrthogonalClusters => {
            let scale = (n as f64).sqrt();
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_samples);
            while basis.len() < spec.num_samples {
                let mut v = gaussian(&mut rng);
                // two passes of modified Gram-Schmidt
                for _ in 0..2 {
                    for b in &basis {
                        let c = dot(&v, b);
                        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                    }
                }
                let nv = dot(&v, &v).sqrt();
                if nv < 1e-8 {
                    continue;
                }
                v.iter_mut().for_each(|x| *x /= nv);
                basis.push(v);
            }
            Ok(basis
                .into_iter()
                .map(|v| v.into_iter().map(|x| x * scale).collect())
                .collect())
        }
    }
}

/// Two independently perturbed views `base + σ g`.
pub fn sample_pair(base_index: usize, base: &[f64], sigma: f64, rng: &mut RunRng) -> AugmentedPair {
    let view = |rng: &mut RunRng| -> Vec<f64> {
        base.iter().map(|&b| b + sigma * standard_normal(rng)).collect()
    };
    let x1 = view(rng);
    let x2 = view(rng);
    AugmentedPair { x1, x2, base_index }
}

/// One fresh augmented pair per base sample (full batch).
pub fn sample_batch(dataset: &[Vec<f64>], sigma: f64, rng: &mut RunRng) -> Vec<AugmentedPair> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, x)| sample_pair(i, x, sigma, rng))
        .collect()
}
