//! Generalized variance function (GVF) smoothing of direct variance
//! estimates and the combined max-variance estimates.

use std::path::Path;

use crate::error::{Error, Result};

/// `ψ ≈ K N^γ`, fitted by OLS of `log ψ̂ᵈ` on `log N`.
#[derive(Clone, Debug, PartialEq)]
pub struct GvfFit {
    pub log_k: f64,
    pub gamma: f64,
    pub residual_variance: f64,
    pub n_used: usize,
}

impl GvfFit {
    pub fn k(&self) -> f64 {
        self.log_k.exp()
    }

    /// Smoothed variance `K̂ N^γ̂`; strictly positive.
    pub fn predict(&self, size: f64) -> f64 {
        (self.log_k + self.gamma * size.ln()).exp()
    }
}

/// Fits the GVF on `(N_i, ψ̂ᵈ_i)`. Domains with `ψ̂ᵈ_i <= 0` (or missing)
/// are left out of the regression.
pub fn gvf_fit(sizes: &[f64], psi_d: &[Option<f64>]) -> Result<GvfFit> {
    let mut pts: Vec<(f64, f64)> = sizes
        .iter()
        .zip(psi_d)
        .filter_map(|(&n, &p)| match p {
            Some(p) if p > 0.0 && p.is_finite() && n > 0.0 => Some((n.ln(), p.ln())),
            _ => None,
        })
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientDomains {
            usable: pts.len(),
            required: 3,
        });
    }
    // canonical order makes the fit independent of input order
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let m = pts.len() as f64;
    let xbar = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    if sxx <= 1e-12 * (1.0 + xbar * xbar) {
        return Err(Error::SingularDesign("all domain sizes are identical".into()));
    }
    let gamma = sxy / sxx;
    let log_k = ybar - gamma * xbar;
    let rss: f64 = pts
        .iter()
        .map(|&(x, y)| {
            let e = y - log_k - gamma * x;
            e * e
        })
        .sum();
    let residual_variance = if pts.len() > 2 { rss / (m - 2.0) } else { 0.0 };
    Ok(GvfFit {
        log_k,
        gamma,
        residual_variance,
        n_used: pts.len(),
    })
}

/// Direct, smoothed and combined variance of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceTriple {
    pub psi_d: f64,
    pub psi_s: f64,
    /// `max{ψ̂ˢ, ψ̂ᵈ}`
    pub psi_c: f64,
    /// `min{ψ̂ˢ, ψ̂ᵈ} / ψ̂ᶜ`, the weight of the direct estimator in the
    /// variance-ratio composite.
    pub lambda_ratio: f64,
}

pub fn combine_variances(psi_s: f64, psi_d: f64) -> Result<VarianceTriple> {
    if !(psi_s > 0.0) || !psi_s.is_finite() {
        return Err(Error::invalid(format!("smoothed variance must be positive, got {psi_s}")));
    }
    if !(psi_d >= 0.0) || !psi_d.is_finite() {
        return Err(Error::invalid(format!("direct variance must be non-negative, got {psi_d}")));
    }
    let psi_c = psi_s.max(psi_d);
    let lambda_ratio = if psi_s == psi_d {
        1.0
    } else {
        psi_s.min(psi_d) / psi_c
    };
    Ok(VarianceTriple {
        psi_d,
        psi_s,
        psi_c,
        lambda_ratio,
    })
}

/// `domain_id,psi_d,psi_s,psi_c,lambda_ratio`
pub fn write_variance_diagnostics(path: &Path, rows: &[(u32, VarianceTriple)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain_id", "psi_d", "psi_s", "psi_c", "lambda_ratio"])?;
    for (id, t) in rows {
        w.write_record([
            id.to_string(),
            t.psi_d.to_string(),
            t.psi_s.to_string(),
            t.psi_c.to_string(),
            t.lambda_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_power_law_is_recovered() {
        let sizes = [100.0, 200.0, 400.0];
        let psi: Vec<Option<f64>> = sizes.iter().map(|n| Some(2.0 / n)).collect();
        let fit = gvf_fit(&sizes, &psi).unwrap();
        assert!((fit.k() - 2.0).abs() < 1e-10);
        assert!((fit.gamma + 1.0).abs() < 1e-10);
        assert_eq!(fit.n_used, 3);
    }

    #[test]
    fn constant_variance_gives_flat_fit() {
        let sizes = [50.0, 80.0, 130.0, 500.0];
        let fit = gvf_fit(&sizes, &[Some(0.003); 4]).unwrap();
        assert!(fit.gamma.abs() < 1e-12);
        assert!((fit.k() - 0.003).abs() < 1e-14);
        assert!((fit.predict(1234.0) - 0.003).abs() < 1e-14);
    }

    #[test]
    fn noisy_fit_matches_normal_equations() {
        let sizes = [120.0, 340.0, 560.0, 910.0, 1500.0];
        let psi = [0.0041, 0.0019, 0.0009, 0.00071, 0.00029];
        let fit = gvf_fit(&sizes, &psi.map(Some)).unwrap();
        // independent 2x2 normal-equations solve by Cramer's rule
        let (mut s1, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (n, p) in sizes.iter().zip(psi) {
            let (x, y) = (n.ln(), p.ln());
            s1 += 1.0;
            sx += x;
            sxx += x * x;
            sy += y;
            sxy += x * y;
        }
        let det = s1 * sxx - sx * sx;
        let a = (sy * sxx - sx * sxy) / det;
        let b = (s1 * sxy - sx * sy) / det;
        assert!((fit.log_k - a).abs() < 1e-10);
        assert!((fit.gamma - b).abs() < 1e-10);
    }

    #[test]
    fn zero_variances_are_excluded_but_predicted() {
        let sizes = [100.0, 200.0, 400.0, 800.0, 1600.0];
        let psi = [Some(0.02), Some(0.0), Some(0.005), None, Some(0.001)];
        let fit = gvf_fit(&sizes, &psi).unwrap();
        assert_eq!(fit.n_used, 3);
        assert!(fit.predict(200.0) > 0.0);
        assert!(fit.predict(800.0) > 0.0);
    }

    #[test]
    fn fit_errors() {
        let e = gvf_fit(&[1.0, 2.0, 3.0], &[Some(0.1), Some(0.0), Some(0.2)]).unwrap_err();
        assert!(matches!(e, Error::InsufficientDomains { usable: 2, .. }));
        let e = gvf_fit(&[5.0; 4], &[Some(0.1), Some(0.2), Some(0.3), Some(0.4)]).unwrap_err();
        assert!(matches!(e, Error::SingularDesign(_)));
    }

    #[test]
    fn prediction_examples() {
        let fit = GvfFit {
            log_k: 2f64.ln(),
            gamma: -1.0,
            residual_variance: 0.0,
            n_used: 3,
        };
        assert!((fit.predict(500.0) - 0.004).abs() < 1e-15);
        assert!(fit.predict(100.0) > fit.predict(101.0));
    }

    #[test]
    fn combine_examples() {
        let t = combine_variances(0.01, 0.01).unwrap();
        assert_eq!((t.psi_c, t.lambda_ratio), (0.01, 1.0));
        let t = combine_variances(0.02, 0.01).unwrap();
        assert_eq!((t.psi_c, t.lambda_ratio), (0.02, 0.5));
        let t = combine_variances(0.02, 0.0).unwrap();
        assert_eq!(t.lambda_ratio, 0.0);
        assert!(combine_variances(0.0, 0.01).is_err());
        assert!(combine_variances(0.01, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn combine_is_symmetric_and_bounded(a in 1e-8f64..1.0, b in 1e-8f64..1.0) {
            let x = combine_variances(a, b).unwrap();
            let y = combine_variances(b, a).unwrap();
            prop_assert_eq!(x.psi_c, y.psi_c);
            prop_assert_eq!(x.lambda_ratio, y.lambda_ratio);
            prop_assert!((0.0..=1.0).contains(&x.lambda_ratio));
            prop_assert!(x.psi_c >= a.max(b));
            let lo = a.min(b);
            prop_assert!((x.lambda_ratio * x.psi_c - lo).abs() <= 1e-15 * lo.max(1e-300) * 4.0);
        }

        #[test]
        fn gvf_is_order_invariant(
            pts in prop::collection::vec((10.0f64..5000.0, 1e-5f64..0.1), 3..20),
            seed in 0u64..1000,
        ) {
            let sizes: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let psi: Vec<Option<f64>> = pts.iter().map(|p| Some(p.1)).collect();
            let mut idx: Vec<usize> = (0..pts.len()).collect();
            idx.rotate_left(seed as usize % pts.len());
            idx.reverse();
            let s2: Vec<f64> = idx.iter().map(|&i| sizes[i]).collect();
            let p2: Vec<Option<f64>> = idx.iter().map(|&i| psi[i]).collect();
            match (gvf_fit(&sizes, &psi), gvf_fit(&s2, &p2)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "fit outcome depends on order"),
            }
        }
    }
}
