//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sae_core::area::{eblup, eblup_mse, fit_fay_herriot, gamma_spread, AreaLevelData, FhFit};
use sae_core::bootstrap::{bootstrap_variance, make_replicate_weights, BootstrapConfig};
use sae_core::composite::{mse_b, risk, SsdDomain};
use sae_core::direct::{direct_estimates, hajek_variance_general, ht_proportion, WeightedObs};
use sae_core::population::{generate_synthetic_population, GeneratorConfig, LaborStatus, Person, Population};
use sae_core::sampling::{combinations, draw_sample, PairwiseProbabilityProvider, SampleDesignConfig};
use sae_core::sim::{
    accuracy, archive_rows, estimate_sample, run_simulation, size_classes_for, write_archive, AccuracyReport,
    Estimator, PipelineOptions, RowKind, SimConfig, SizeClass,
};
use sae_core::StudyVariable;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn exhaustive_design() -> Outcome {
    let start = Instant::now();
    let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let (n_pop, n) = (6, 3);
    let provider = PairwiseProbabilityProvider::srswor_exhaustive(n_pop, n).unwrap();
    let samples = combinations(n_pop, n);
    let truth = y.iter().sum::<f64>() / n_pop as f64;
    let w = n_pop as f64 / n as f64;

    let mut ht_mean = 0.0;
    let mut hajek = Vec::new();
    let mut v_mean = 0.0;
    for s in &samples {
        let obs: Vec<WeightedObs> = s.iter().map(|&k| WeightedObs::new(w, y[k])).collect();
        ht_mean += ht_proportion(&obs, n_pop as f64);
        hajek.push(obs.iter().map(|o| o.y).sum::<f64>() / n as f64);
        let units: Vec<(usize, f64)> = s.iter().map(|&k| (k, y[k])).collect();
        v_mean += hajek_variance_general(&units, &provider).unwrap();
    }
    let r = samples.len() as f64;
    ht_mean /= r;
    v_mean /= r;
    let h_mean = hajek.iter().sum::<f64>() / r;
    let h_var = hajek.iter().map(|h| (h - h_mean) * (h - h_mean)).sum::<f64>() / r;
    let ht_err = (ht_mean - truth).abs();
    let rel = (v_mean - h_var).abs() / h_var;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        samples.len() == 20 && ht_err < 1e-12 && rel <= 0.15 && secs < 1.0,
        format!("20 samples, HT bias {ht_err:.2e}, E[v]={v_mean:.6} vs Var={h_var:.6} (rel {rel:.3}), {secs:.3}s"),
    )
}

// ---------------------------------------------------------------- 2

/// Gauss–Jordan inverse of a small dense matrix.
fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

/// Second transcription of the EBLUP MSE, written from the textbook form
/// with an explicit inverse and the raw `M Σγ² - (Σγ)²`.
fn mse_second_transcription(psi: &[f64], z: &[Vec<f64>], sigma2: f64) -> Vec<f64> {
    let m = psi.len();
    let p = z[0].len();
    let v: Vec<f64> = psi.iter().map(|x| x + sigma2).collect();
    let gamma: Vec<f64> = psi.iter().map(|x| sigma2 / (x + sigma2)).collect();
    let mut a = vec![vec![0.0; p]; p];
    for i in 0..m {
        for r in 0..p {
            for c in 0..p {
                a[r][c] += z[i][r] * z[i][c] / v[i];
            }
        }
    }
    let ainv = invert(a);
    let sum_g: f64 = gamma.iter().sum();
    let sum_g2: f64 = gamma.iter().map(|g| g * g).sum();
    let sum_inv_v: f64 = v.iter().map(|x| 1.0 / x).sum();
    (0..m)
        .map(|i| {
            let mut quad = 0.0;
            for r in 0..p {
                for c in 0..p {
                    quad += z[i][r] * ainv[r][c] * z[i][c];
                }
            }
            let g1 = gamma[i] * psi[i];
            let g3 = 4.0 * m as f64 / v[i] * sum_inv_v.powi(-2);
            let g4 = 2.0 * sigma2 * sum_g.powi(-3) * (m as f64 * sum_g2 - sum_g * sum_g);
            g1 + (1.0 - gamma[i]).powi(2) * (quad + g3 - g4)
        })
        .collect()
}

fn model_instance(rng: &mut ChaCha8Rng, m: usize, p: usize, sigma2: f64, psi: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let z: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let mut row = vec![1.0];
            row.extend((1..p).map(|_| rng.random::<f64>()));
            row
        })
        .collect();
    let beta: Vec<f64> = (0..p).map(|j| if j == 0 { 0.05 } else { 0.02 }).collect();
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut theta_true = Vec::with_capacity(m);
    let mut theta_hat = Vec::with_capacity(m);
    for i in 0..m {
        let mu: f64 = z[i].iter().zip(&beta).map(|(a, b)| a * b).sum();
        let t = mu + sigma2.sqrt() * std.sample(rng);
        theta_true.push(t);
        theta_hat.push(t + psi[i].sqrt() * std.sample(rng));
    }
    (theta_true, theta_hat, z)
}

fn mse_double_coding() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (m, p) = (30, 6);
    let mut worst: f64 = 0.0;
    let mut positive = 0;
    for _ in 0..100 {
        let psi: Vec<f64> = (0..m).map(|_| 0.0005 + 0.004 * rng.random::<f64>()).collect();
        let (_, theta, z) = model_instance(&mut rng, m, p, 0.002, &psi);
        let data = AreaLevelData::new(theta, psi.clone(), z.clone()).unwrap();
        let fit = fit_fay_herriot(&data).unwrap();
        if fit.sigma_v2 > 0.0 {
            positive += 1;
        }
        let a = eblup_mse(&data, &fit).unwrap();
        let b = mse_second_transcription(&psi, &z, fit.sigma_v2);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    // homoscedastic: equal γ make the braces vanish exactly
    let equal = vec![0.37; m];
    let spread = gamma_spread(&equal);
    let psi = vec![0.002; m];
    let (_, theta, z) = model_instance(&mut rng, m, p, 0.002, &psi);
    let data = AreaLevelData::new(theta, psi, z).unwrap();
    let fit = FhFit::with_sigma_v2(&data, 0.001).unwrap();
    let homo_spread = gamma_spread(&fit.gamma);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && spread == 0.0 && homo_spread == 0.0 && positive >= 50 && secs < 1.0,
        format!(
            "max |diff| {worst:.2e} over 100 instances ({positive} with σ̂²>0), homoscedastic braces {homo_spread:e}, {secs:.3}s"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn fh_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, p, sigma2) = (200, 3, 0.001);
    let psi: Vec<f64> = (0..m).map(|_| 0.0005 + 0.0025 * rng.random::<f64>()).collect();
    let mut sum = 0.0;
    for _ in 0..500 {
        let (_, theta, z) = model_instance(&mut rng, m, p, sigma2, &psi);
        let data = AreaLevelData::new(theta, psi.clone(), z).unwrap();
        sum += fit_fay_herriot(&data).unwrap().sigma_v2;
    }
    let mean = sum / 500.0;
    let rel = (mean - sigma2).abs() / sigma2;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rel <= 0.15 && secs < 10.0,
        format!("mean σ̂² {mean:.6} vs 0.001 (rel {rel:.3}), {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 4

fn mse_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, p, sigma2, reps) = (100, 3, 0.001f64, 1000);
    let psi: Vec<f64> = (0..m).map(|i| 0.0003 + 0.004 * i as f64 / (m - 1) as f64).collect();
    let mut est = vec![0.0; m];
    let mut emp = vec![0.0; m];
    let z_fixed: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let mut row = vec![1.0];
            row.extend((1..p).map(|_| rng.random::<f64>()));
            row
        })
        .collect();
    let std = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..reps {
        let mut truth = Vec::with_capacity(m);
        let mut theta = Vec::with_capacity(m);
        for i in 0..m {
            let mu = 0.05 + 0.02 * z_fixed[i][1..].iter().sum::<f64>();
            let t = mu + sigma2.sqrt() * std.sample(&mut rng);
            truth.push(t);
            theta.push(t + psi[i].sqrt() * std.sample(&mut rng));
        }
        let data = AreaLevelData::new(theta, psi.clone(), z_fixed.clone()).unwrap();
        let fit = fit_fay_herriot(&data).unwrap();
        let pred = eblup(&data, &fit);
        let mse = eblup_mse(&data, &fit).unwrap();
        for i in 0..m {
            est[i] += mse[i] / reps as f64;
            emp[i] += (pred[i] - truth[i]).powi(2) / reps as f64;
        }
    }
    // terciles by sampling variance (largest ψ = smallest domains)
    let mut parts = Vec::new();
    let mut pass = true;
    for (k, name) in ["small", "medium", "large"].iter().enumerate() {
        let idx: Vec<usize> = match k {
            0 => (67..100).collect(),
            1 => (34..67).collect(),
            _ => (0..34).collect(),
        };
        let e: f64 = idx.iter().map(|&i| est[i]).sum::<f64>() / idx.len() as f64;
        let t: f64 = idx.iter().map(|&i| emp[i]).sum::<f64>() / idx.len() as f64;
        let rel = (e - t).abs() / t;
        pass &= rel <= 0.25;
        parts.push(format!("{name} {e:.6}/{t:.6} (rel {rel:.3})"));
    }
    outcome(pass, format!("estimate/empirical MSE: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 5

fn non_negativity(desk: &[DeskRun]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..100_000 {
        let l: f64 = rng.random();
        let psi = 1e-8 + rng.random::<f64>() * 0.05;
        let v = rng.random::<f64>() * 0.01;
        if !(mse_b(l, psi, v) >= 0.0) {
            violations += 1;
        }
    }
    let mut negative = 0;
    let mut total = 0;
    for run in desk {
        for row in &run.unemployed_rows {
            if matches!(row.estimator, Estimator::C | Estimator::Ssd)
                && run.classes.class[row.domain_id as usize - 1] == SizeClass::Small
            {
                if let Some(u) = row.mse_u {
                    total += 1;
                    negative += usize::from(u < 0.0);
                }
            }
        }
    }
    outcome(
        violations == 0 && negative > 0,
        format!("mse_b negative in {violations} of 100000 inputs; mse_u negative in {negative} of {total} small-domain cells"),
    )
}

// ---------------------------------------------------------------- 6

fn risk_constancy() -> Outcome {
    let cfg = GeneratorConfig::default();
    let (pop, frame) = generate_synthetic_population(&cfg, 6).unwrap();
    let sample = draw_sample(&pop, &SampleDesignConfig::new(400, 6)).unwrap();
    let opts = PipelineOptions {
        estimators: vec![Estimator::Ssd],
        bootstrap: BootstrapConfig::new(100, 6),
        ..PipelineOptions::default()
    };
    let est = estimate_sample(&sample, &frame, StudyVariable::Unemployed, &opts, None).unwrap();
    let doms: Vec<SsdDomain> = (0..frame.len())
        .filter_map(|i| {
            let d = est.direct[i].as_ref()?;
            let a = &est.aux[i];
            let mo = a.moments?;
            Some(SsdDomain {
                domain_id: d.domain_id,
                n_hat: d.n_hat,
                size: frame.domains[i].size as f64,
                direct: d.theta,
                synthetic: a.synthetic?,
                var_direct: mo.var_direct,
                var_synthetic: mo.var_synthetic,
                cov: mo.cov,
            })
        })
        .collect();
    let min_ratio = doms.iter().map(|d| d.n_hat / d.size).fold(f64::INFINITY, f64::min);
    let grid: Vec<f64> = (1..=50).map(|k| min_ratio * k as f64 / 50.0).collect();
    let values: Vec<u64> = grid.iter().map(|&d| risk(&doms, d).unwrap().to_bits()).collect();
    let identical = values.iter().all(|&v| v == values[0]);
    outcome(
        identical && doms.len() >= 20,
        format!("{} grid points in (0, {min_ratio:.4}] over {} domains, all bit-equal: {identical}", grid.len(), doms.len()),
    )
}

// ---------------------------------------------------------------- 7

fn bootstrap_oracle() -> Outcome {
    // one-person households make household PPS an equal-probability design
    let n_pop = 20_000;
    let persons: Vec<Person> = (0..n_pop)
        .map(|k| Person {
            id: k as u64 + 1,
            household_id: k as u64 + 1,
            domain_id: 1,
            status: if k % 100 < 7 {
                LaborStatus::Unemployed
            } else {
                LaborStatus::Employed
            },
        })
        .collect();
    let pop = Population::from_persons(persons, 1).unwrap();
    let n = 800;
    let sample = draw_sample(&pop, &SampleDesignConfig::new(n, 7)).unwrap();
    let set = make_replicate_weights(&sample, &BootstrapConfig::new(2000, 7)).unwrap();
    let sums_ok = (0..set.replicates()).all(|b| set.multiplicities(b).iter().sum::<u32>() as usize == set.m);
    let var = StudyVariable::Unemployed;
    let boot = bootstrap_variance(&sample, &set, |w| direct_estimates(&sample, w, var)[0].as_ref().map(|d| d.theta)).unwrap();
    let y: Vec<f64> = sample.persons.iter().map(|p| p.y(var)).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let s2 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let analytic = (1.0 - n as f64 / n_pop as f64) * s2 / n as f64;
    let rel = (boot.variance - analytic).abs() / analytic;
    outcome(
        rel <= 0.15 && sums_ok,
        format!(
            "bootstrap {:.3e} vs analytic {analytic:.3e} (rel {rel:.3}); Σm* = m in all {} replicates: {sums_ok}",
            boot.variance,
            set.replicates()
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

struct DeskRun {
    unemployed: AccuracyReport,
    employed: AccuracyReport,
    unemployed_rows: Vec<sae_core::sim::ArchiveRow>,
    classes: sae_core::sim::SizeClasses,
}

fn desk_config(seed: u64) -> SimConfig {
    SimConfig {
        replicates: 200,
        n_households: 400,
        bootstrap_b: 100,
        seed,
        ..SimConfig::default()
    }
}

fn desk_runs() -> (Vec<DeskRun>, f64) {
    let start = Instant::now();
    let runs = (1..=5u64)
        .map(|seed| {
            let (pop, frame) = generate_synthetic_population(&GeneratorConfig::default(), seed).unwrap();
            let cfg = desk_config(seed);
            let out = run_simulation(&pop, &frame, &cfg).unwrap();
            let rows_u = archive_rows(&out.records[0].1);
            let rows_e = archive_rows(&out.records[1].1);
            let classes = size_classes_for(&pop, &cfg, &rows_u);
            DeskRun {
                unemployed: accuracy(&rows_u, &frame.truths(StudyVariable::Unemployed), &classes),
                employed: accuracy(&rows_e, &frame.truths(StudyVariable::Employed), &classes),
                unemployed_rows: rows_u,
                classes,
            }
        })
        .collect();
    (runs, start.elapsed().as_secs_f64())
}

fn seed_average(runs: &[DeskRun], pick: impl Fn(&DeskRun) -> &AccuracyReport, est: Estimator) -> (f64, f64) {
    let mut acc = (0.0, 0.0);
    for r in runs {
        let (rmse, ab) = pick(r).row(est, RowKind::Point).and_then(|row| row.any()).unwrap();
        acc.0 += rmse / runs.len() as f64;
        acc.1 += ab / runs.len() as f64;
    }
    acc
}

fn desk_pattern(runs: &[DeskRun], secs: f64) -> Outcome {
    let avg = |e| seed_average(runs, |r| &r.unemployed, e);
    let (d_rmse, d_ab) = avg(Estimator::Direct);
    let (o_rmse, o_ab) = avg(Estimator::Opt);
    let mut pass = secs < 600.0;
    let mut parts = vec![format!("direct {:.4}/{:.4}", 100.0 * d_rmse, 100.0 * d_ab)];
    for e in [Estimator::Synthetic, Estimator::Fh, Estimator::C, Estimator::Ssd] {
        let (rmse, ab) = avg(e);
        pass &= o_rmse <= rmse && rmse <= d_rmse && d_ab < ab;
        parts.push(format!("{e} {:.4}/{:.4}", 100.0 * rmse, 100.0 * ab));
    }
    pass &= d_ab < o_ab;
    parts.push(format!("opt {:.4}/{:.4}", 100.0 * o_rmse, 100.0 * o_ab));
    outcome(pass, format!("RMSE/AB ×10² over 5 seeds: {}; {secs:.1}s", parts.join(", ")))
}

fn employed_degradation(runs: &[DeskRun]) -> Outcome {
    let avg = |e| seed_average(runs, |r| &r.employed, e).0;
    let (c, ssd) = (avg(Estimator::C), avg(Estimator::Ssd));
    outcome(c > ssd, format!("employed RMSE ×10²: C {:.4} vs SSD {:.4}", 100.0 * c, 100.0 * ssd))
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let (pop, frame) = generate_synthetic_population(&GeneratorConfig::default(), 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for parallel in [false, true] {
        let cfg = SimConfig {
            replicates: 12,
            bootstrap_b: 40,
            seed: 10,
            parallel,
            ..SimConfig::default()
        };
        let out = run_simulation(&pop, &frame, &cfg).unwrap();
        let mut all = Vec::new();
        for (var, recs) in &out.records {
            let path = dir.path().join(format!("records_{var}_{parallel}.csv"));
            write_archive(&path, &archive_rows(recs)).unwrap();
            all.extend(std::fs::read(&path).unwrap());
        }
        bytes.push(all);
    }
    let same = bytes[0] == bytes[1];
    outcome(same, format!("serial vs parallel archives byte-identical: {same} ({} bytes)", bytes[0].len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |k: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {k:>2} [{tag}] {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "exhaustive design oracle", exhaustive_design());
    report(2, "EBLUP MSE double coding", mse_double_coding());
    report(3, "FH moment recovery", fh_recovery());
    report(4, "EBLUP MSE calibration", mse_calibration());
    let (runs, secs) = desk_runs();
    report(5, "non-negativity", non_negativity(&runs));
    report(6, "risk-curve constancy", risk_constancy());
    report(7, "bootstrap oracle", bootstrap_oracle());
    report(8, "desk-scale pattern", desk_pattern(&runs, secs));
    report(9, "near-1/2 degradation", employed_degradation(&runs));
    report(10, "determinism", determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
