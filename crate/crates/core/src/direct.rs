//! Direct (design-based) estimators of domain proportions and their
//! variance estimators.

use crate::error::{Error, Result};
use crate::population::StudyVariable;
use crate::sampling::{PairwiseProbabilityProvider, Sample};

/// One sampled person as seen by a direct estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedObs {
    pub weight: f64,
    pub y: f64,
}

impl WeightedObs {
    pub fn new(weight: f64, y: f64) -> Self {
        WeightedObs { weight, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Hajek,
    HorvitzThompson,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDirectEstimate {
    pub domain_id: u32,
    /// Realized sample size (persons with positive weight).
    pub n: usize,
    /// `N̂_i = Σ w_k`.
    pub n_hat: f64,
    pub theta: f64,
    pub psi: f64,
    pub kind: EstimatorKind,
}

/// Weighted sample proportion `Σ w_k y_k / Σ w_k` and `N̂_i = Σ w_k`.
///
/// Fails with [`Error::EmptyDomainSample`] when the domain has no sample
/// (or only zero weights).
pub fn hajek_proportion(obs: &[WeightedObs]) -> Result<(f64, f64)> {
    let (mut n_hat, mut t) = (0.0, 0.0);
    for o in obs {
        n_hat += o.weight;
        t += o.weight * o.y;
    }
    if obs.is_empty() || n_hat <= 0.0 {
        return Err(Error::EmptyDomainSample);
    }
    Ok((t / n_hat, n_hat))
}

/// Horvitz–Thompson proportion `N_i^{-1} Σ y_k / π_k`. Can exceed 1; an
/// empty sample gives 0.
pub fn ht_proportion(obs: &[WeightedObs], domain_size: f64) -> f64 {
    obs.iter().map(|o| o.weight * o.y).sum::<f64>() / domain_size
}

/// Variance estimator of the Hájek proportion with arbitrary joint
/// inclusion probabilities. `units` holds `(label, y_k)` where labels index
/// into `provider`.
///
/// Diagonal terms are written `w_k (w_k - 1) r_k²` (`π_kk = π_k`), so with
/// the independence provider the result is bit-identical to
/// [`hajek_variance_simplified`].
pub fn hajek_variance_general(units: &[(usize, f64)], provider: &PairwiseProbabilityProvider) -> Result<f64> {
    let obs: Vec<WeightedObs> = units
        .iter()
        .map(|&(k, y)| WeightedObs::new(1.0 / provider.first(k), y))
        .collect();
    let (theta, n_hat) = hajek_proportion(&obs)?;
    let resid: Vec<f64> = obs.iter().map(|o| o.y - theta).collect();
    let mut sum = 0.0;
    for (a, &(k, _)) in units.iter().enumerate() {
        for (b, &(l, _)) in units.iter().enumerate() {
            if a == b {
                let w = obs[a].weight;
                sum += w * (w - 1.0) * (resid[a] * resid[a]);
                continue;
            }
            let pkl = provider.joint(k, l);
            if pkl <= 0.0 {
                return Err(Error::ZeroJointProbability(k, l));
            }
            let (pk, pl) = (provider.first(k), provider.first(l));
            sum += (1.0 - pk * pl / pkl) * obs[a].weight * obs[b].weight * resid[a] * resid[b];
        }
    }
    Ok(sum / (n_hat * n_hat))
}

/// `N̂_i^{-2} Σ w_k (w_k - 1) (y_k - θ̂_i)²`, the Hájek variance estimator
/// under `π_kl ≈ π_k π_l`.
pub fn hajek_variance_simplified(obs: &[WeightedObs]) -> Result<f64> {
    let (theta, n_hat) = hajek_proportion(obs)?;
    let mut sum = 0.0;
    for o in obs {
        let r = o.y - theta;
        sum += o.weight * (o.weight - 1.0) * (r * r);
    }
    Ok(sum / (n_hat * n_hat))
}

/// Hájek estimates with the simplified variance for every domain, using
/// `weights` (aligned with `sample.persons`) in place of the design
/// weights. `None` marks an empty domain sample.
pub fn direct_estimates(
    sample: &Sample,
    weights: &[f64],
    var: StudyVariable,
) -> Vec<Option<DomainDirectEstimate>> {
    let mut obs = Vec::new();
    (0..sample.n_domains())
        .map(|i| {
            obs.clear();
            obs.extend(
                sample
                    .domain_persons(i)
                    .iter()
                    .filter(|&&k| weights[k] > 0.0)
                    .map(|&k| WeightedObs::new(weights[k], sample.persons[k].y(var))),
            );
            let (theta, n_hat) = hajek_proportion(&obs).ok()?;
            let psi = hajek_variance_simplified(&obs).ok()?;
            Some(DomainDirectEstimate {
                domain_id: i as u32 + 1,
                n: obs.len(),
                n_hat,
                theta,
                psi,
                kind: EstimatorKind::Hajek,
            })
        })
        .collect()
}
