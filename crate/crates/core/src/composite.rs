//! Design-based compositions of direct and synthetic estimators: the
//! variance-ratio composite, the adaptive sample-size-dependent (SSD)
//! composite, the oracle optimal composite, and their MSE estimators.

use std::fmt;

use crate::error::{Error, Result};
use crate::smoothing::VarianceTriple;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompositeMethod {
    /// Variance-ratio weight `min{ψ̂ˢ,ψ̂ᵈ}/ψ̂ᶜ`.
    C,
    Ssd,
    Opt,
}

impl fmt::Display for CompositeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompositeMethod::C => "C",
            CompositeMethod::Ssd => "SSD",
            CompositeMethod::Opt => "opt",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeEstimate {
    pub domain_id: u32,
    pub lambda: f64,
    pub theta: f64,
    /// Difference-based estimate; may be negative.
    pub mse_u: Option<f64>,
    /// `λ(1-λ)ψ + σ̂²`; never negative.
    pub mse_b: Option<f64>,
    pub method: CompositeMethod,
}

/// `λ θ̂ᵈ + (1 - λ) θ̂ˢ` for `λ ∈ [0, 1]`.
pub fn linear_combination(lambda: f64, direct: f64, synthetic: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("composite weight {lambda} outside [0, 1]")));
    }
    Ok(lambda * direct + (1.0 - lambda) * synthetic)
}

/// MSE-optimal weight `(MSE_S - C) / (MSE_d + MSE_S - 2C)`. Pass `c = 0`
/// for the usual approximation.
pub fn optimal_lambda(mse_direct: f64, mse_synthetic: f64, c: f64) -> Result<f64> {
    let den = mse_direct + mse_synthetic - 2.0 * c;
    if !(den > 0.0) {
        return Err(Error::invalid(format!("degenerate optimal-weight denominator {den}")));
    }
    Ok((mse_synthetic - c) / den)
}

/// Sample-size-dependent weight: 1 when `N̂_i/N_i >= δ`, otherwise
/// `N̂_i / (δ N_i)`.
pub fn ssd_weight(n_hat: f64, size: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    if !(size > 0.0) || !(n_hat >= 0.0) {
        return Err(Error::invalid("ssd weight needs N_i > 0 and N̂_i >= 0"));
    }
    let ratio = n_hat / size;
    Ok(if ratio >= delta { 1.0 } else { n_hat / (delta * size) })
}

/// Variance-ratio composite: the direct estimate gets weight
/// `min{ψ̂ˢ,ψ̂ᵈ}/ψ̂ᶜ`, the synthetic part must come from GLS with `ψ̂ᶜ`.
pub fn composite_c(domain_id: u32, direct: f64, synthetic_c: f64, triple: &VarianceTriple) -> CompositeEstimate {
    let lambda = triple.lambda_ratio;
    CompositeEstimate {
        domain_id,
        lambda,
        theta: lambda * direct + (1.0 - lambda) * synthetic_c,
        mse_u: None,
        mse_b: None,
        method: CompositeMethod::C,
    }
}

/// `(θ̂ - θ̂ᵈ)² - σ̂²(θ̂ - θ̂ᵈ) + σ̂²(θ̂)`, returned unclamped.
pub fn mse_gw(target: f64, direct: f64, var_difference: f64, var_target: f64) -> f64 {
    let d = target - direct;
    d * d - var_difference + var_target
}

/// `λ(1-λ)ψ̂ + σ̂²(θ̂ᶜ)`.
pub fn mse_b(lambda: f64, psi: f64, var_target: f64) -> f64 {
    lambda * (1.0 - lambda) * psi + var_target
}

/// Per-domain inputs of the SSD risk function. The bootstrap moments are
/// those of the direct and synthetic replicate estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdDomain {
    pub domain_id: u32,
    pub n_hat: f64,
    pub size: f64,
    pub direct: f64,
    pub synthetic: f64,
    pub var_direct: f64,
    pub var_synthetic: f64,
    pub cov: f64,
}

impl SsdDomain {
    /// Bootstrap variance of `λ θ̂ᵈ + (1-λ) θ̂ˢ` for a fixed `λ`.
    pub fn var_composite(&self, lambda: f64) -> f64 {
        let mu = 1.0 - lambda;
        lambda * lambda * self.var_direct + mu * mu * self.var_synthetic + 2.0 * lambda * mu * self.cov
    }

    /// Bootstrap variance of `θ̂ˢ - θ̂ᵈ`.
    pub fn var_difference(&self) -> f64 {
        self.var_direct + self.var_synthetic - 2.0 * self.cov
    }

    /// Difference-based MSE estimate of the composite with weight
    /// `λ̂_i(δ)`, holding `λ̂_i(δ)` at its full-sample value inside the
    /// bootstrap: `σ̂²(θ̃ - θ̂ᵈ) = (1-λ)² σ̂²(θ̂ˢ - θ̂ᵈ)`.
    pub fn mse_u(&self, delta: f64) -> Result<f64> {
        let lambda = ssd_weight(self.n_hat, self.size, delta)?;
        let mu = 1.0 - lambda;
        let target = lambda * self.direct + mu * self.synthetic;
        Ok(mse_gw(
            target,
            self.direct,
            mu * mu * self.var_difference(),
            self.var_composite(lambda),
        ))
    }
}

/// Average difference-based MSE estimate `r(δ)` over the domains.
pub fn risk(domains: &[SsdDomain], delta: f64) -> Result<f64> {
    if domains.is_empty() {
        return Err(Error::invalid("risk needs at least one domain"));
    }
    let mut sum = 0.0;
    for d in domains {
        sum += d.mse_u(delta)?;
    }
    Ok(sum / domains.len() as f64)
}

pub fn risk_curve(domains: &[SsdDomain], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::invalid("empty delta grid"));
    }
    grid.iter().map(|&d| Ok((d, risk(domains, d)?))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsdConfig {
    pub grid: Vec<f64>,
    /// Width at which golden-section refinement stops.
    pub tol: f64,
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig {
            grid: (1..=40).map(|k| 0.25 * k as f64).collect(),
            tol: 1e-3,
        }
    }
}

/// Grid search followed by golden-section refinement inside the bracket
/// around the best grid point. Returns the minimizer and every evaluated
/// `(δ, f(δ))`; ties go to the smallest `δ`.
pub fn minimize_on_grid<F>(f: F, config: &SsdConfig) -> Result<(f64, Vec<(f64, f64)>)>
where
    F: Fn(f64) -> Result<f64>,
{
    if config.grid.is_empty() {
        return Err(Error::invalid("empty delta grid"));
    }
    let mut grid = config.grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut evals: Vec<(f64, f64)> = Vec::with_capacity(grid.len() + 64);
    for &d in &grid {
        evals.push((d, f(d)?));
    }
    let best = (0..evals.len()).fold(0, |b, j| if evals[j].1 < evals[b].1 { j } else { b });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];

    if hi > lo {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let (mut a, mut b) = (lo, hi);
        let mut x1 = b - INV_PHI * (b - a);
        let mut x2 = a + INV_PHI * (b - a);
        let mut f1 = f(x1)?;
        let mut f2 = f(x2)?;
        evals.push((x1, f1));
        evals.push((x2, f2));
        while b - a > config.tol {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - INV_PHI * (b - a);
                f1 = f(x1)?;
                evals.push((x1, f1));
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + INV_PHI * (b - a);
                f2 = f(x2)?;
                evals.push((x2, f2));
            }
        }
    }
    let (delta, _) = evals
        .iter()
        .copied()
        .reduce(|acc, e| {
            if e.1 < acc.1 || (e.1 == acc.1 && e.0 < acc.0) {
                e
            } else {
                acc
            }
        })
        .expect("grid is non-empty");
    evals.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok((delta, evals))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsdSolution {
    pub delta_star: f64,
    /// Every evaluated `(δ, r(δ))`, sorted by `δ`.
    pub risk_curve: Vec<(f64, f64)>,
    pub estimates: Vec<CompositeEstimate>,
}

/// Adaptive SSD composite: `δ̂* = argmin r(δ)`, then `λ̂_i(δ̂*)` per
/// domain. `mse_u` is filled; `mse_b` needs `ψ̂` and is left to the caller
/// (see [`SsdSolution::fill_mse_b`]).
pub fn adaptive_ssd(domains: &[SsdDomain], config: &SsdConfig) -> Result<SsdSolution> {
    let (delta_star, risk_curve) = minimize_on_grid(|d| risk(domains, d), config)?;
    let estimates = domains
        .iter()
        .map(|d| {
            let lambda = ssd_weight(d.n_hat, d.size, delta_star)?;
            Ok(CompositeEstimate {
                domain_id: d.domain_id,
                lambda,
                theta: lambda * d.direct + (1.0 - lambda) * d.synthetic,
                mse_u: Some(d.mse_u(delta_star)?),
                mse_b: None,
                method: CompositeMethod::Ssd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SsdSolution {
        delta_star,
        risk_curve,
        estimates,
    })
}

impl SsdSolution {
    /// Sets `mse_b` from the working variances `psi` (aligned with the
    /// input domains).
    pub fn fill_mse_b(&mut self, domains: &[SsdDomain], psi: &[f64]) {
        for ((e, d), &p) in self.estimates.iter_mut().zip(domains).zip(psi) {
            e.mse_b = Some(mse_b(e.lambda, p, d.var_composite(e.lambda)));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleWeights {
    pub mse_direct: f64,
    pub mse_synthetic: f64,
    /// `E(θ̂ᵈ - θ)(θ̂ˢ - θ)`
    pub c: f64,
    /// Optimal weight clamped to `[0, 1]`; `None` for a degenerate domain.
    pub lambda_star: Option<f64>,
    pub replicates_used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleComposite {
    pub weights: Vec<OracleWeights>,
    /// `[replicate][domain]`; `None` where no estimate exists.
    pub estimates: Vec<Vec<Option<f64>>>,
}

/// Oracle optimal composite from a Monte Carlo archive of
/// `(direct, synthetic)` pairs indexed `[replicate][domain]`. A missing
/// direct estimate (empty domain) is skipped in the moments and the
/// replicate falls back to the synthetic value.
pub fn oracle_optimal_composite(archive: &[Vec<(Option<f64>, f64)>], truths: &[f64]) -> Result<OracleComposite> {
    if archive.len() < 2 {
        return Err(Error::invalid(format!("oracle composite needs R >= 2, got {}", archive.len())));
    }
    if archive.iter().any(|r| r.len() != truths.len()) {
        return Err(Error::invalid("archive rows must cover every domain"));
    }
    let weights: Vec<OracleWeights> = truths
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let (mut md, mut ms, mut c, mut n) = (0.0, 0.0, 0.0, 0usize);
            for rep in archive {
                if let (Some(d), s) = rep[i] {
                    md += (d - theta) * (d - theta);
                    ms += (s - theta) * (s - theta);
                    c += (d - theta) * (s - theta);
                    n += 1;
                }
            }
            let nf = n as f64;
            let (md, ms, c) = (md / nf, ms / nf, c / nf);
            let lambda_star = if n >= 2 {
                optimal_lambda(md, ms, c).ok().map(|l| l.clamp(0.0, 1.0))
            } else {
                None
            };
            OracleWeights {
                mse_direct: md,
                mse_synthetic: ms,
                c,
                lambda_star,
                replicates_used: n,
            }
        })
        .collect();
    let estimates = archive
        .iter()
        .map(|rep| {
            rep.iter()
                .zip(&weights)
                .map(|(&(d, s), w)| {
                    let l = w.lambda_star?;
                    Some(match d {
                        Some(d) => l * d + (1.0 - l) * s,
                        None => s,
                    })
                })
                .collect()
        })
        .collect();
    Ok(OracleComposite { weights, estimates })
}
