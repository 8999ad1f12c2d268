//! Monte-Carlo check of error cancellation when averaging noisy task
//! vectors `τᵢ = τ* + εᵢ`, `εᵢ ~ N(0, σ²I)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyTaskVectorEnsemble {
    pub tau_star: Vec<f64>,
    pub sigma: f64,
    pub samples_per_trial: usize,
    pub trials: usize,
    pub seed: u64,
}

impl NoisyTaskVectorEnsemble {
    /// `τ*` is drawn from a standard normal of dimension `dim`.
    pub fn new(dim: usize, sigma: f64, samples_per_trial: usize, trials: usize, seed: u64) -> Self {
        let mut r = rng(derive_seed(seed, &[b"tau-star"]));
        let tau_star = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        Self { tau_star, sigma, samples_per_trial, trials, seed }
    }

    pub fn dim(&self) -> usize {
        self.tau_star.len()
    }

    /// The `samples_per_trial` task vectors of trial `t`.
    pub fn draw_trial(&self, t: usize) -> Vec<Vec<f64>> {
        let mut r = rng(derive_seed(self.seed, &[b"trial", &(t as u64).to_le_bytes()]));
        (0..self.samples_per_trial)
            .map(|_| {
                self.tau_star
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        m + self.sigma * z
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceReport {
    pub k: usize,
    /// `E‖mean(τ₁..τ_K) − τ*‖ / E‖τ₁ − τ*‖`.
    pub ratio: f64,
    pub expected: f64,
    pub mean_single_error: f64,
    pub mean_merged_error: f64,
    /// Set when σ = 0; the ratio is then defined as 1.
    pub zero_noise: bool,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn variance_reduction_trial(ensemble: &NoisyTaskVectorEnsemble, k: usize) -> Result<VarianceReport, ToyError> {
    if k == 0 || k > ensemble.samples_per_trial {
        return Err(ToyError::TooFewSamples { k, available: ensemble.samples_per_trial });
    }
    if ensemble.trials == 0 || ensemble.dim() == 0 {
        return Err(ToyError::EmptyData);
    }
    let expected = 1.0 / (k as f64).sqrt();
    if ensemble.sigma == 0.0 {
        return Ok(VarianceReport {
            k,
            ratio: 1.0,
            expected,
            mean_single_error: 0.0,
            mean_merged_error: 0.0,
            zero_noise: true,
        });
    }
    let d = ensemble.dim();
    let (mut single, mut merged) = (0.0, 0.0);
    for t in 0..ensemble.trials {
        let samples = ensemble.draw_trial(t);
        let mean: Vec<f64> = (0..d).map(|i| samples[..k].iter().map(|s| s[i]).sum::<f64>() / k as f64).collect();
        single += distance(&samples[0], &ensemble.tau_star);
        merged += distance(&mean, &ensemble.tau_star);
    }
    let n = ensemble.trials as f64;
    Ok(VarianceReport {
        k,
        ratio: merged / single,
        expected,
        mean_single_error: single / n,
        mean_merged_error: merged / n,
        zero_noise: false,
    })
}
