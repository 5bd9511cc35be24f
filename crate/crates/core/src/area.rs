//! Area-level models: GLS regression, the Fay–Herriot moment estimator of
//! the random-effect variance, EBLUP with its second-order MSE estimator,
//! and regression-synthetic estimates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Per-domain model input: direct estimates, working sampling variances
/// and covariate vectors (leading 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AreaLevelData {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl AreaLevelData {
    pub fn new(theta: Vec<f64>, psi: Vec<f64>, z: Vec<Vec<f64>>) -> Result<Self> {
        let m = theta.len();
        if psi.len() != m || z.len() != m {
            return Err(Error::invalid("theta, psi and z must have one entry per domain"));
        }
        let p = z.first().map_or(0, Vec::len);
        if p == 0 || z.iter().any(|row| row.len() != p) {
            return Err(Error::invalid("covariate rows must share a positive length"));
        }
        if m <= p {
            return Err(Error::invalid(format!("need more domains than covariates (M={m}, P={p})")));
        }
        if psi.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("working variances must be positive and finite"));
        }
        if theta.iter().chain(z.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite estimate or covariate"));
        }
        Ok(AreaLevelData { theta, psi, z })
    }

    pub fn m(&self) -> usize {
        self.theta.len()
    }

    pub fn p(&self) -> usize {
        self.z[0].len()
    }
}

/// Weighted least squares solution kept in QR form so that quadratic
/// forms in `(Σ z z'/v)^{-1}` are available.
struct WeightedFit {
    r: DMatrix<f64>,
    beta: DVector<f64>,
}

impl WeightedFit {
    fn new(z: &[Vec<f64>], y: &[f64], v: &[f64]) -> Result<Self> {
        let (m, p) = (z.len(), z[0].len());
        if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid("GLS weights require positive variances"));
        }
        let x = DMatrix::from_fn(m, p, |i, j| z[i][j] / v[i].sqrt());
        let yw = DVector::from_fn(m, |i, _| y[i] / v[i].sqrt());
        let qr = x.clone().qr();
        let r = qr.r();
        let collinear: Vec<usize> = (0..p)
            .filter(|&j| {
                let norm = x.column(j).norm();
                norm == 0.0 || r[(j, j)].abs() <= 1e-10 * norm
            })
            .collect();
        if !collinear.is_empty() {
            return Err(Error::RankDeficient(collinear));
        }
        let qty = qr.q().transpose() * yw;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;
        Ok(WeightedFit { r, beta })
    }

    /// `z' (Σ z z'/v)^{-1} z = |R^{-T} z|²`.
    fn quad_form(&self, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        let u = self
            .r
            .transpose()
            .solve_lower_triangular(&zv)
            .expect("R has a nonzero diagonal");
        u.norm_squared()
    }
}

/// GLS coefficients `(Σ z z'/v)^{-1} Σ z θ̂/v`.
///
/// Rank deficiency is reported with the 0-based indices of columns that
/// lie in the span of the preceding ones.
pub fn gls_beta(data: &AreaLevelData, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != data.m() {
        return Err(Error::invalid("one GLS variance per domain is required"));
    }
    Ok(WeightedFit::new(&data.z, &data.theta, v)?.beta.as_slice().to_vec())
}

/// `z_i' β` for every covariate row.
pub fn linear_predictions(z: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    z.iter()
        .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect()
}

/// Regression-synthetic estimates `z_i' β̂` with `β̂` from GLS on `v = ψ̂`.
pub fn regression_synthetic(data: &AreaLevelData) -> Result<Vec<f64>> {
    let beta = gls_beta(data, &data.psi)?;
    Ok(linear_predictions(&data.z, &beta))
}

/// Moment-equation value `Σ (θ̂_i - z_i'β̂(σ²))² / (ψ_i + σ²) - (M - P)`
/// together with its negated derivative `Σ r_i² / (ψ_i + σ²)²`.
fn moment_equation(data: &AreaLevelData, sigma2: f64) -> Result<(f64, f64)> {
    let v: Vec<f64> = data.psi.iter().map(|p| p + sigma2).collect();
    let fit = WeightedFit::new(&data.z, &data.theta, &v)?;
    let pred = linear_predictions(&data.z, fit.beta.as_slice());
    let (mut q, mut dq) = (0.0, 0.0);
    for i in 0..data.m() {
        let r = data.theta[i] - pred[i];
        q += r * r / v[i];
        dq += r * r / (v[i] * v[i]);
    }
    Ok((q - (data.m() - data.p()) as f64, dq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentFit {
    pub sigma_v2: f64,
    pub iterations: usize,
    /// Moment-equation residual at `sigma_v2` (positive when truncated).
    pub residual: f64,
}

pub const MOMENT_TOL: f64 = 1e-8;
pub const MOMENT_MAX_ITER: usize = 200;

/// Fay–Herriot method-of-moments estimator of `σ_v²`, truncated at zero.
///
/// The moment function is decreasing in `σ²`, so a non-positive value at
/// zero means `σ̂_v² = 0`. Otherwise a bracketed Newton iteration (the
/// derivative is exact because `β̂` minimizes the weighted residual sum)
/// with step halving runs from the OLS-based starting value.
pub fn fit_sigma_v2_moments(data: &AreaLevelData) -> Result<MomentFit> {
    let (f0, _) = moment_equation(data, 0.0)?;
    if f0 <= 0.0 {
        return Ok(MomentFit {
            sigma_v2: 0.0,
            iterations: 0,
            residual: f0,
        });
    }
    let m = data.m() as f64;
    let ols = gls_beta(data, &vec![1.0; data.m()])?;
    let pred = linear_predictions(&data.z, &ols);
    let rss: f64 = data.theta.iter().zip(&pred).map(|(t, p)| (t - p) * (t - p)).sum();
    let mean_psi = data.psi.iter().sum::<f64>() / m;
    let mut sigma = (rss / m - mean_psi).max(0.0);

    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let (mut f, mut df) = moment_equation(data, sigma)?;
    for it in 1..=MOMENT_MAX_ITER {
        if f.abs() <= MOMENT_TOL {
            return Ok(MomentFit {
                sigma_v2: sigma,
                iterations: it - 1,
                residual: f,
            });
        }
        if f > 0.0 {
            lo = lo.max(sigma);
        } else {
            hi = hi.min(sigma);
        }
        let mut next = if df > 0.0 { sigma + f / df } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo.max(mean_psi) };
        }
        // damping: halve the step until |F| does not grow
        let mut step = next - sigma;
        let (mut fn_, mut dfn) = moment_equation(data, next)?;
        let mut tries = 0;
        while fn_.abs() > f.abs() && tries < 30 && (next - lo) * (hi - next) > 0.0 {
            step *= 0.5;
            let cand = sigma + step;
            if !(cand > lo && cand < hi) {
                break;
            }
            next = cand;
            (fn_, dfn) = moment_equation(data, next)?;
            tries += 1;
        }
        if next == sigma {
            break;
        }
        sigma = next;
        f = fn_;
        df = dfn;
    }
    if f.abs() <= MOMENT_TOL {
        return Ok(MomentFit {
            sigma_v2: sigma,
            iterations: MOMENT_MAX_ITER,
            residual: f,
        });
    }
    Err(Error::NoConvergence {
        iterations: MOMENT_MAX_ITER,
        last: sigma,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FhFit {
    pub beta: Vec<f64>,
    pub sigma_v2: f64,
    /// `γ̂_i = σ̂_v² / (ψ̂_i + σ̂_v²)`
    pub gamma: Vec<f64>,
    pub iterations: usize,
}

impl FhFit {
    /// Builds the fit for a given `σ_v²` (GLS `β̂` with `v_i = ψ̂_i + σ_v²`).
    pub fn with_sigma_v2(data: &AreaLevelData, sigma_v2: f64) -> Result<Self> {
        if !(sigma_v2 >= 0.0) {
            return Err(Error::invalid("sigma_v2 must be non-negative"));
        }
        let v: Vec<f64> = data.psi.iter().map(|p| p + sigma_v2).collect();
        let beta = gls_beta(data, &v)?;
        let gamma = data.psi.iter().map(|p| sigma_v2 / (p + sigma_v2)).collect();
        Ok(FhFit {
            beta,
            sigma_v2,
            gamma,
            iterations: 0,
        })
    }
}

/// Fay–Herriot fit with the moment estimator of `σ_v²`.
pub fn fit_fay_herriot(data: &AreaLevelData) -> Result<FhFit> {
    let mf = fit_sigma_v2_moments(data)?;
    let mut fit = FhFit::with_sigma_v2(data, mf.sigma_v2)?;
    fit.iterations = mf.iterations;
    Ok(fit)
}

/// EBLUP `γ̂_i θ̂_i + (1 - γ̂_i) z_i'β̂`.
pub fn eblup(data: &AreaLevelData, fit: &FhFit) -> Vec<f64> {
    let synth = linear_predictions(&data.z, &fit.beta);
    (0..data.m())
        .map(|i| fit.gamma[i] * data.theta[i] + (1.0 - fit.gamma[i]) * synth[i])
        .collect()
}

/// `M Σγ_j² - (Σγ_j)²`, computed as `Σ_{j<k} (γ_j - γ_k)²` so that it is
/// exactly zero when all `γ_j` are equal.
pub fn gamma_spread(gamma: &[f64]) -> f64 {
    let mut spread = 0.0;
    for j in 0..gamma.len() {
        for k in j + 1..gamma.len() {
            let d = gamma[j] - gamma[k];
            spread += d * d;
        }
    }
    spread
}

/// Second-order MSE estimator of the EBLUP under the moment estimator of
/// `σ_v²`:
///
/// `γ̂_i ψ̂_i + (1-γ̂_i)² [ z_i'(Σ z z'/v)^{-1} z_i + 4M v_i^{-1} (Σ v_j^{-1})^{-2}
///  - 2σ̂_v² (Σγ̂_j)^{-3} {M Σγ̂_j² - (Σγ̂_j)²} ]`, `v_j = ψ̂_j + σ̂_v²`.
///
/// The braces are evaluated as `Σ_{j<k} (γ̂_j - γ̂_k)²`, which is the same
/// quantity and is exactly zero for equal `γ̂_j`. When every `γ̂_j` is zero
/// the last term is taken as its limit, 0.
pub fn eblup_mse(data: &AreaLevelData, fit: &FhFit) -> Result<Vec<f64>> {
    let m = data.m();
    let v: Vec<f64> = data.psi.iter().map(|p| p + fit.sigma_v2).collect();
    let wf = WeightedFit::new(&data.z, &data.theta, &v)?;
    let sum_inv: f64 = v.iter().map(|x| 1.0 / x).sum();
    let sum_gamma: f64 = fit.gamma.iter().sum();
    let third = if fit.sigma_v2 == 0.0 || sum_gamma == 0.0 {
        0.0
    } else {
        -2.0 * fit.sigma_v2 * gamma_spread(&fit.gamma) / sum_gamma.powi(3)
    };
    Ok((0..m)
        .map(|i| {
            let g = fit.gamma[i];
            let lead = g * data.psi[i];
            let g2 = wf.quad_form(&data.z[i]);
            let g3 = 4.0 * m as f64 / v[i] / (sum_inv * sum_inv);
            lead + (1.0 - g) * (1.0 - g) * (g2 + g3 + third)
        })
        .collect())
}

/// `term,index,value` rows: `beta` (1-based coefficient index),
/// `sigma_v2` (index 0) and `gamma` (domain id).
pub fn write_fit_report(path: &Path, fit: &FhFit, domain_ids: &[u32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["term", "index", "value"])?;
    for (j, b) in fit.beta.iter().enumerate() {
        w.write_record(["beta".to_string(), (j + 1).to_string(), b.to_string()])?;
    }
    w.write_record(["sigma_v2".to_string(), "0".to_string(), fit.sigma_v2.to_string()])?;
    for (id, g) in domain_ids.iter().zip(&fit.gamma) {
        w.write_record(["gamma".to_string(), id.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
