//! Rao–Wu–Yue rescaling bootstrap at the household level.
//!
//! Each replicate draws `m = n' - 1` households with replacement from the
//! `n'` sampled households; household `l` selected `m*_l` times gets weight
//! `w*_l = n' m*_l w_l / m`, shared by all of its members.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::sampling::Sample;

pub const DEFAULT_REPLICATES: usize = 200;

/// Share of failed replicates above which a variance estimate is refused.
pub const MAX_EXCLUDED_SHARE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapConfig {
    /// `B`
    pub replicates: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapConfig { replicates, seed }
    }
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig::new(DEFAULT_REPLICATES, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateWeightSet {
    /// `m = n' - 1`
    pub m: usize,
    multiplicities: Vec<Vec<u32>>,
    weights: Vec<Vec<f64>>,
}

impl ReplicateWeightSet {
    pub fn replicates(&self) -> usize {
        self.weights.len()
    }

    pub fn multiplicities(&self, b: usize) -> &[u32] {
        &self.multiplicities[b]
    }

    /// Household-level replicate weights `w*_l`, aligned with
    /// `Sample::households`.
    pub fn household_weights(&self, b: usize) -> &[f64] {
        &self.weights[b]
    }

    pub fn person_weights(&self, b: usize, sample: &Sample) -> Vec<f64> {
        sample.person_weights(&self.weights[b])
    }

    /// `replicate,household_id,multiplicity,weight_star` (replicates 1-based).
    pub fn write_csv(&self, path: &Path, sample: &Sample) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["replicate", "household_id", "multiplicity", "weight_star"])?;
        for b in 0..self.replicates() {
            for (l, hh) in sample.households.iter().enumerate() {
                w.write_record([
                    (b + 1).to_string(),
                    hh.id.to_string(),
                    self.multiplicities[b][l].to_string(),
                    self.weights[b][l].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One replicate's multiplicities and weights. Stream `b` of `seed` is
/// used so replicates can be generated independently of each other.
fn replicate(sample: &Sample, seed: u64, b: usize) -> (Vec<u32>, Vec<f64>) {
    let n_prime = sample.n_households();
    let m = n_prime - 1;
    let mut rng = rng::stream(seed, b as u64);
    let mut mult = vec![0u32; n_prime];
    for _ in 0..m {
        mult[rng.random_range(0..n_prime)] += 1;
    }
    let weights = sample
        .households
        .iter()
        .zip(&mult)
        .map(|(hh, &k)| n_prime as f64 * k as f64 * hh.weight / m as f64)
        .collect();
    (mult, weights)
}

pub fn make_replicate_weights(sample: &Sample, config: &BootstrapConfig) -> Result<ReplicateWeightSet> {
    if sample.n_households() < 2 {
        return Err(Error::invalid(format!(
            "bootstrap needs at least 2 sampled households, got {}",
            sample.n_households()
        )));
    }
    if config.replicates < 2 {
        return Err(Error::invalid("bootstrap needs B >= 2"));
    }
    let (multiplicities, weights) = (0..config.replicates)
        .map(|b| replicate(sample, config.seed, b))
        .unzip();
    Ok(ReplicateWeightSet {
        m: sample.n_households() - 1,
        multiplicities,
        weights,
    })
}

/// Mean and `B`-divisor variance of replicate values.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b;
    (mean, var)
}

/// `B`-divisor covariance of paired replicate values.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapVariance {
    pub variance: f64,
    pub mean: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Bootstrap variance `B^{-1} Σ (θ̂*_b - θ̄*)²` of `estimator`, which maps
/// person-level weights (aligned with `sample.persons`) to an estimate.
/// Replicates where the estimator returns `None` are excluded and counted;
/// the divisor is the number of replicates used.
pub fn bootstrap_variance<F>(sample: &Sample, set: &ReplicateWeightSet, estimator: F) -> Result<BootstrapVariance>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let values: Vec<Option<f64>> = (0..set.replicates())
        .into_par_iter()
        .map(|b| estimator(&set.person_weights(b, sample)))
        .collect();
    let used: Vec<f64> = values.iter().flatten().copied().collect();
    let excluded = values.len() - used.len();
    if used.is_empty() || excluded as f64 > MAX_EXCLUDED_SHARE * values.len() as f64 {
        return Err(Error::BootstrapExclusions {
            excluded,
            total: values.len(),
        });
    }
    let (mean, variance) = mean_and_variance(&used);
    Ok(BootstrapVariance {
        variance,
        mean,
        used: used.len(),
        excluded,
    })
}
