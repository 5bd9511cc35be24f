//! Monte Carlo harness: the per-sample estimation pipeline, repeated
//! sampling, accuracy measures by domain-size class, and report rendering.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::{eblup, eblup_mse, fit_fay_herriot, gls_beta, linear_predictions, AreaLevelData};
use crate::bootstrap::{make_replicate_weights, BootstrapConfig, ReplicateWeightSet, DEFAULT_REPLICATES, MAX_EXCLUDED_SHARE};
use crate::composite::{
    adaptive_ssd, mse_b, mse_gw, oracle_optimal_composite, ssd_weight, SsdConfig, SsdDomain,
};
use crate::direct::{direct_estimates, DomainDirectEstimate};
use crate::error::{Error, Result};
use crate::population::{DomainFrame, GeneratorConfig, Population, StudyVariable};
use crate::rng;
use crate::sampling::{draw_sample_with, Sample, SampleDesignConfig};
use crate::smoothing::{combine_variances, gvf_fit, VarianceTriple};

const TAG_SAMPLE: u64 = 1;
const TAG_BOOTSTRAP: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Direct,
    #[serde(alias = "s")]
    Synthetic,
    Fh,
    C,
    Ssd,
    Opt,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Direct,
        Estimator::Synthetic,
        Estimator::Fh,
        Estimator::C,
        Estimator::Ssd,
        Estimator::Opt,
    ];

    /// Label used in archives and reports.
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Direct => "direct",
            Estimator::Synthetic => "S",
            Estimator::Fh => "FH",
            Estimator::C => "C",
            Estimator::Ssd => "SSD",
            Estimator::Opt => "opt",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Estimator::Direct),
            "s" | "synthetic" => Ok(Estimator::Synthetic),
            "fh" => Ok(Estimator::Fh),
            "c" => Ok(Estimator::C),
            "ssd" => Ok(Estimator::Ssd),
            "opt" => Ok(Estimator::Opt),
            other => Err(Error::invalid(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClassMode {
    /// `n̄_i = n' Σ_{l∈U_i} h_l² / N`, the expected number of sampled persons.
    #[default]
    Analytic,
    /// Mean realized `n_i` over the replicates.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// `R`
    pub replicates: usize,
    /// `n'`
    pub n_households: usize,
    /// `B`
    pub bootstrap_b: usize,
    pub estimators: Vec<Estimator>,
    pub variables: Vec<StudyVariable>,
    pub seed: u64,
    /// Use GVF-smoothed sampling variances in the model-based estimators.
    pub smoothing: bool,
    pub parallel: bool,
    pub size_classes: SizeClassMode,
    pub generator: Option<GeneratorConfig>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            replicates: 200,
            n_households: 400,
            bootstrap_b: DEFAULT_REPLICATES,
            estimators: Estimator::ALL.to_vec(),
            variables: StudyVariable::ALL.to_vec(),
            seed: 1,
            smoothing: true,
            parallel: true,
            size_classes: SizeClassMode::Analytic,
            generator: None,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be at least 1".into()));
        }
        if self.estimators.contains(&Estimator::Opt) && self.replicates < 2 {
            return Err(Error::InvalidConfig("opt needs at least 2 replicates".into()));
        }
        if self.needs_bootstrap() && self.bootstrap_b < 2 {
            return Err(Error::InvalidConfig("bootstrap_b must be at least 2".into()));
        }
        if self.variables.is_empty() {
            return Err(Error::InvalidConfig("no study variable selected".into()));
        }
        if let Some(g) = &self.generator {
            g.validate()?;
        }
        Ok(())
    }

    fn needs_bootstrap(&self) -> bool {
        self.estimators.iter().any(|e| *e != Estimator::Direct && *e != Estimator::Fh)
    }

    fn sorted_estimators(&self) -> Vec<Estimator> {
        let mut e = self.estimators.clone();
        e.sort();
        e.dedup();
        e
    }
}

/// Options of the single-sample pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOptions {
    pub estimators: Vec<Estimator>,
    pub smoothing: bool,
    pub bootstrap: BootstrapConfig,
    pub ssd: SsdConfig,
    pub parallel: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            estimators: Estimator::ALL.to_vec(),
            smoothing: true,
            bootstrap: BootstrapConfig::default(),
            ssd: SsdConfig::default(),
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub domain_id: u32,
    pub estimator: Estimator,
    pub theta: Option<f64>,
    pub mse_u: Option<f64>,
    pub mse_b: Option<f64>,
    pub lambda: Option<f64>,
}

/// Bootstrap moments of one domain. Direct-dependent moments use the
/// replicates where the domain kept a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootMoments {
    pub var_direct: f64,
    pub var_synthetic: f64,
    pub cov: f64,
    pub used: usize,
}

impl BootMoments {
    fn var_composite(&self, lambda: f64) -> f64 {
        let mu = 1.0 - lambda;
        lambda * lambda * self.var_direct + mu * mu * self.var_synthetic + 2.0 * lambda * mu * self.cov
    }

    fn var_difference(&self) -> f64 {
        self.var_direct + self.var_synthetic - 2.0 * self.cov
    }
}

/// Pass-1 quantities the oracle composite needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainAux {
    pub direct: Option<f64>,
    pub synthetic: Option<f64>,
    /// Working sampling variance `ψ̂_i`.
    pub psi: Option<f64>,
    pub moments: Option<BootMoments>,
    /// Bootstrap variance of the synthetic estimator over all replicates.
    pub var_synthetic_all: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEstimates {
    /// Realized domain sample sizes `n_i`.
    pub n_i: Vec<usize>,
    pub direct: Vec<Option<DomainDirectEstimate>>,
    pub rows: Vec<EstimateRow>,
    pub aux: Vec<DomainAux>,
    pub delta_star: Option<f64>,
    /// Module failures that left cells missing.
    pub failures: Vec<String>,
}

impl SampleEstimates {
    pub fn rows_for(&self, estimator: Estimator) -> impl Iterator<Item = &EstimateRow> {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }
}

/// Model-based pieces shared by the full-sample and bootstrap passes.
struct ModelFit {
    psi_work: Vec<f64>,
    triples: Vec<Option<VarianceTriple>>,
    fitted: Vec<usize>,
    data: AreaLevelData,
    synthetic: Vec<f64>,
    composite_c: Vec<(f64, f64)>,
}

fn model_fit(direct: &[Option<DomainDirectEstimate>], frame: &DomainFrame, smoothing: bool) -> Result<ModelFit> {
    let sizes = frame.sizes();
    let psi_d: Vec<Option<f64>> = direct.iter().map(|d| d.as_ref().map(|d| d.psi)).collect();
    let gvf = gvf_fit(&sizes, &psi_d)?;
    let psi_s: Vec<f64> = sizes.iter().map(|&n| gvf.predict(n)).collect();
    let psi_work: Vec<f64> = psi_s
        .iter()
        .zip(&psi_d)
        .map(|(&s, d)| match d {
            Some(d) if !smoothing && *d > 0.0 => *d,
            _ => s,
        })
        .collect();
    let fitted: Vec<usize> = (0..direct.len()).filter(|&i| direct[i].is_some()).collect();
    let triples: Vec<Option<VarianceTriple>> = direct
        .iter()
        .zip(&psi_s)
        .map(|(d, &s)| d.as_ref().map(|d| combine_variances(s, d.psi)).transpose())
        .collect::<Result<_>>()?;
    let data = AreaLevelData::new(
        fitted.iter().map(|&i| direct[i].as_ref().unwrap().theta).collect(),
        fitted.iter().map(|&i| psi_work[i]).collect(),
        fitted.iter().map(|&i| frame.domains[i].z.clone()).collect(),
    )?;
    let z_all: Vec<Vec<f64>> = frame.domains.iter().map(|d| d.z.clone()).collect();
    let synthetic = linear_predictions(&z_all, &gls_beta(&data, &data.psi)?);
    let psi_c: Vec<f64> = fitted.iter().map(|&i| triples[i].unwrap().psi_c).collect();
    let synthetic_c = linear_predictions(&z_all, &gls_beta(&data, &psi_c)?);
    let composite_c = (0..direct.len())
        .map(|i| match (&direct[i], &triples[i]) {
            (Some(d), Some(t)) => {
                let l = t.lambda_ratio;
                (l, l * d.theta + (1.0 - l) * synthetic_c[i])
            }
            _ => (0.0, synthetic_c[i]),
        })
        .collect();
    Ok(ModelFit {
        psi_work,
        triples,
        fitted,
        data,
        synthetic,
        composite_c,
    })
}

/// Per-domain `(θ̂ᵈ*, θ̂ˢ*, θ̂ᶜ*)` of one bootstrap replicate.
type ReplicatePoint = Vec<(Option<f64>, Option<f64>, Option<f64>)>;

fn replicate_point(sample: &Sample, weights: &[f64], frame: &DomainFrame, var: StudyVariable, smoothing: bool) -> ReplicatePoint {
    let direct = direct_estimates(sample, weights, var);
    let fit = model_fit(&direct, frame, smoothing).ok();
    (0..direct.len())
        .map(|i| {
            (
                direct[i].as_ref().map(|d| d.theta),
                fit.as_ref().map(|f| f.synthetic[i]),
                fit.as_ref().map(|f| f.composite_c[i].1),
            )
        })
        .collect()
}

fn within_cap(used: usize, total: usize) -> bool {
    used > 0 && (total - used) as f64 <= MAX_EXCLUDED_SHARE * total as f64
}

fn variance_of(values: &[f64]) -> f64 {
    crate::bootstrap::mean_and_variance(values).1
}

/// Variance over the replicates where `x` is defined.
fn single_variance(x: impl Iterator<Item = Option<f64>>, total: usize) -> Option<f64> {
    let v: Vec<f64> = x.flatten().collect();
    within_cap(v.len(), total).then(|| variance_of(&v))
}

fn pair_moments(pairs: impl Iterator<Item = (Option<f64>, Option<f64>)>, total: usize) -> Option<BootMoments> {
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.filter_map(|(x, y)| Some((x?, y?))).unzip();
    if !within_cap(a.len(), total) {
        return None;
    }
    Some(BootMoments {
        var_direct: variance_of(&a),
        var_synthetic: variance_of(&b),
        cov: crate::bootstrap::covariance(&a, &b),
        used: a.len(),
    })
}

/// Runs every requested estimator except the oracle composite on one
/// sample. `boot` supplies shared replicate weights; when `None` and a
/// bootstrap is needed they are generated from `options.bootstrap`.
pub fn estimate_sample(
    sample: &Sample,
    frame: &DomainFrame,
    var: StudyVariable,
    options: &PipelineOptions,
    boot: Option<&ReplicateWeightSet>,
) -> Result<SampleEstimates> {
    if sample.n_domains() != frame.len() {
        return Err(Error::invalid("sample and domain frame disagree on M"));
    }
    let m = frame.len();
    let mut estimators = options.estimators.clone();
    estimators.sort();
    estimators.dedup();
    let mut failures = Vec::new();

    let weights = sample.design_weights();
    let direct = direct_estimates(sample, &weights, var);
    let needs_model = estimators.iter().any(|&e| e != Estimator::Direct);
    let fit = if needs_model {
        match model_fit(&direct, frame, options.smoothing) {
            Ok(f) => Some(f),
            Err(e) => {
                failures.push(format!("model fit: {e}"));
                None
            }
        }
    } else {
        None
    };

    let needs_boot = fit.is_some()
        && estimators
            .iter()
            .any(|e| matches!(e, Estimator::Synthetic | Estimator::C | Estimator::Ssd | Estimator::Opt));
    let owned;
    let set = match (needs_boot, boot) {
        (false, _) => None,
        (true, Some(s)) => Some(s),
        (true, None) => match make_replicate_weights(sample, &options.bootstrap) {
            Ok(s) => {
                owned = s;
                Some(&owned)
            }
            Err(e) => {
                failures.push(format!("bootstrap: {e}"));
                None
            }
        },
    };
    let points: Vec<ReplicatePoint> = match set {
        None => Vec::new(),
        Some(set) => {
            let eval = |b: usize| replicate_point(sample, &set.person_weights(b, sample), frame, var, options.smoothing);
            if options.parallel {
                (0..set.replicates()).into_par_iter().map(eval).collect()
            } else {
                (0..set.replicates()).map(eval).collect()
            }
        }
    };
    let total = points.len();

    let theta_d = |i: usize| direct[i].as_ref().map(|d| d.theta);
    let mut aux: Vec<DomainAux> = (0..m)
        .map(|i| DomainAux {
            direct: theta_d(i),
            synthetic: fit.as_ref().map(|f| f.synthetic[i]),
            psi: fit.as_ref().map(|f| f.psi_work[i]),
            moments: None,
            var_synthetic_all: None,
        })
        .collect();
    let mut var_c = vec![None; m];
    let mut var_c_diff = vec![None; m];
    if total > 0 {
        for i in 0..m {
            aux[i].moments = pair_moments(points.iter().map(|p| (p[i].0, p[i].1)), total);
            aux[i].var_synthetic_all = single_variance(points.iter().map(|p| p[i].1), total);
            var_c[i] = single_variance(points.iter().map(|p| p[i].2), total);
            var_c_diff[i] = single_variance(points.iter().map(|p| Some(p[i].2? - p[i].0?)), total);
        }
    }

    let mut rows = Vec::with_capacity(estimators.len() * m);
    let mut delta_star = None;
    let id = |i: usize| frame.domains[i].id;
    for &est in &estimators {
        match est {
            Estimator::Direct => {
                for i in 0..m {
                    rows.push(EstimateRow {
                        domain_id: id(i),
                        estimator: est,
                        theta: theta_d(i),
                        mse_u: None,
                        mse_b: None,
                        lambda: theta_d(i).map(|_| 1.0),
                    });
                }
            }
            Estimator::Synthetic => {
                for i in 0..m {
                    let s = aux[i].synthetic;
                    let mse_u = match (s, theta_d(i), aux[i].moments) {
                        (Some(s), Some(d), Some(mo)) => Some(mse_gw(s, d, mo.var_difference(), mo.var_synthetic)),
                        _ => None,
                    };
                    rows.push(EstimateRow {
                        domain_id: id(i),
                        estimator: est,
                        theta: s,
                        mse_u,
                        mse_b: None,
                        lambda: s.map(|_| 0.0),
                    });
                }
            }
            Estimator::Fh => {
                let mut theta = vec![None; m];
                let mut mse = vec![None; m];
                let mut gamma = vec![None; m];
                if let Some(f) = &fit {
                    match fit_fay_herriot(&f.data) {
                        Ok(fh) => {
                            let z_all: Vec<Vec<f64>> = frame.domains.iter().map(|d| d.z.clone()).collect();
                            let synth = linear_predictions(&z_all, &fh.beta);
                            for i in 0..m {
                                theta[i] = Some(synth[i]);
                                gamma[i] = Some(0.0);
                            }
                            let e = eblup(&f.data, &fh);
                            let em = eblup_mse(&f.data, &fh);
                            if let Err(err) = &em {
                                failures.push(format!("FH mse: {err}"));
                            }
                            for (k, &i) in f.fitted.iter().enumerate() {
                                theta[i] = Some(e[k]);
                                gamma[i] = Some(fh.gamma[k]);
                                mse[i] = em.as_ref().ok().map(|v| v[k]);
                            }
                        }
                        Err(err) => failures.push(format!("FH: {err}")),
                    }
                }
                for i in 0..m {
                    rows.push(EstimateRow {
                        domain_id: id(i),
                        estimator: est,
                        theta: theta[i],
                        mse_u: mse[i],
                        mse_b: None,
                        lambda: gamma[i],
                    });
                }
            }
            Estimator::C => {
                for i in 0..m {
                    let mut row = EstimateRow {
                        domain_id: id(i),
                        estimator: est,
                        theta: None,
                        mse_u: None,
                        mse_b: None,
                        lambda: None,
                    };
                    if let Some(f) = &fit {
                        let (l, c) = f.composite_c[i];
                        row.lambda = Some(l);
                        row.theta = Some(c);
                        if let Some(vc) = var_c[i] {
                            row.mse_b = Some(mse_b(l, f.psi_work[i], vc));
                            if let (Some(d), Some(vdiff)) = (theta_d(i), var_c_diff[i]) {
                                row.mse_u = Some(mse_gw(c, d, vdiff, vc));
                            }
                        }
                        debug_assert!(f.triples[i].is_some() == theta_d(i).is_some());
                    }
                    rows.push(row);
                }
            }
            Estimator::Ssd => {
                let mut out: Vec<EstimateRow> = (0..m)
                    .map(|i| EstimateRow {
                        domain_id: id(i),
                        estimator: est,
                        theta: None,
                        mse_u: None,
                        mse_b: None,
                        lambda: None,
                    })
                    .collect();
                if let Some(f) = &fit {
                    let members: Vec<usize> = (0..m)
                        .filter(|&i| direct[i].is_some() && aux[i].moments.is_some())
                        .collect();
                    let doms: Vec<SsdDomain> = members
                        .iter()
                        .map(|&i| {
                            let d = direct[i].as_ref().unwrap();
                            let mo = aux[i].moments.unwrap();
                            SsdDomain {
                                domain_id: id(i),
                                n_hat: d.n_hat,
                                size: frame.domains[i].size as f64,
                                direct: d.theta,
                                synthetic: f.synthetic[i],
                                var_direct: mo.var_direct,
                                var_synthetic: mo.var_synthetic,
                                cov: mo.cov,
                            }
                        })
                        .collect();
                    match adaptive_ssd(&doms, &options.ssd) {
                        Ok(sol) => {
                            delta_star = Some(sol.delta_star);
                            for i in 0..m {
                                let row = &mut out[i];
                                match &direct[i] {
                                    Some(d) => {
                                        let l = ssd_weight(d.n_hat, frame.domains[i].size as f64, sol.delta_star)?;
                                        row.lambda = Some(l);
                                        row.theta = Some(l * d.theta + (1.0 - l) * f.synthetic[i]);
                                    }
                                    None => {
                                        row.lambda = Some(0.0);
                                        row.theta = Some(f.synthetic[i]);
                                        row.mse_b = aux[i].var_synthetic_all.map(|v| mse_b(0.0, f.psi_work[i], v));
                                    }
                                }
                            }
                            for (e, &i) in sol.estimates.iter().zip(&members) {
                                let mo = aux[i].moments.unwrap();
                                out[i].mse_u = e.mse_u;
                                out[i].mse_b = Some(mse_b(e.lambda, f.psi_work[i], mo.var_composite(e.lambda)));
                            }
                        }
                        Err(err) => failures.push(format!("SSD: {err}")),
                    }
                }
                rows.extend(out);
            }
            // filled by the second pass of the simulation
            Estimator::Opt => {}
        }
    }

    Ok(SampleEstimates {
        n_i: sample.domain_sample_sizes(),
        direct,
        rows,
        aux,
        delta_star,
        failures,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimates: SampleEstimates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    /// Records per study variable, in configuration order.
    pub records: Vec<(StudyVariable, Vec<ReplicateRecord>)>,
    /// `λ*_i` per variable when the oracle composite ran.
    pub oracle_lambdas: Vec<(StudyVariable, Vec<Option<f64>>)>,
}

/// Runs `R` replicates of sample draw plus estimation, then the oracle
/// composite pass. Replicate `r` draws its sample and bootstrap weights
/// from streams indexed by `r`, so serial and parallel runs agree exactly.
pub fn run_simulation(pop: &Population, frame: &DomainFrame, config: &SimConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let design = SampleDesignConfig::new(config.n_households, config.seed);
    design.validate(pop)?;
    let estimators = config.sorted_estimators();
    let options = PipelineOptions {
        estimators: estimators.clone(),
        smoothing: config.smoothing,
        bootstrap: BootstrapConfig::new(config.bootstrap_b, 0),
        ssd: SsdConfig::default(),
        parallel: config.parallel,
    };
    let sample_seed = rng::derive_seed(config.seed, TAG_SAMPLE);
    let boot_seed = rng::derive_seed(config.seed, TAG_BOOTSTRAP);

    let run_one = |r: usize| -> Result<Vec<ReplicateRecord>> {
        let mut stream = rng::stream(sample_seed, r as u64);
        let sample = draw_sample_with(pop, &design, &mut stream)?;
        let boot_cfg = BootstrapConfig::new(config.bootstrap_b, rng::derive_seed(boot_seed, r as u64));
        let set = if config.needs_bootstrap() {
            make_replicate_weights(&sample, &boot_cfg).ok()
        } else {
            None
        };
        let mut opts = options.clone();
        opts.bootstrap = boot_cfg;
        config
            .variables
            .iter()
            .map(|&var| {
                Ok(ReplicateRecord {
                    replicate: r + 1,
                    estimates: estimate_sample(&sample, frame, var, &opts, set.as_ref())?,
                })
            })
            .collect()
    };
    let per_rep: Vec<Vec<ReplicateRecord>> = if config.parallel {
        (0..config.replicates).into_par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        (0..config.replicates).map(run_one).collect::<Result<_>>()?
    };

    let mut records: Vec<(StudyVariable, Vec<ReplicateRecord>)> =
        config.variables.iter().map(|&v| (v, Vec::with_capacity(config.replicates))).collect();
    for rep in per_rep {
        for (k, rec) in rep.into_iter().enumerate() {
            records[k].1.push(rec);
        }
    }

    let mut oracle_lambdas = Vec::new();
    if estimators.contains(&Estimator::Opt) {
        for (var, recs) in &mut records {
            let lambdas = apply_oracle(recs, &frame.truths(*var))?;
            oracle_lambdas.push((*var, lambdas));
        }
    }
    Ok(SimulationOutput { records, oracle_lambdas })
}

/// Second pass: oracle weights from the whole archive, then `opt` rows
/// for every replicate. Replicates without synthetic estimates are left
/// out of the moments and get missing `opt` cells.
fn apply_oracle(records: &mut [ReplicateRecord], truths: &[f64]) -> Result<Vec<Option<f64>>> {
    let m = truths.len();
    let complete: Vec<usize> = (0..records.len())
        .filter(|&r| records[r].estimates.aux.iter().all(|a| a.synthetic.is_some()))
        .collect();
    let archive: Vec<Vec<(Option<f64>, f64)>> = complete
        .iter()
        .map(|&r| {
            records[r]
                .estimates
                .aux
                .iter()
                .map(|a| (a.direct, a.synthetic.unwrap()))
                .collect()
        })
        .collect();
    let lambdas: Vec<Option<f64>> = if archive.len() >= 2 {
        oracle_optimal_composite(&archive, truths)?
            .weights
            .iter()
            .map(|w| w.lambda_star)
            .collect()
    } else {
        vec![None; m]
    };
    for rec in records.iter_mut() {
        let est = &mut rec.estimates;
        for i in 0..m {
            let a = &est.aux[i];
            let mut row = EstimateRow {
                domain_id: i as u32 + 1,
                estimator: Estimator::Opt,
                theta: None,
                mse_u: None,
                mse_b: None,
                lambda: None,
            };
            if let (Some(s), Some(l)) = (a.synthetic, lambdas[i]) {
                match a.direct {
                    Some(d) => {
                        row.lambda = Some(l);
                        row.theta = Some(l * d + (1.0 - l) * s);
                        if let (Some(mo), Some(psi)) = (a.moments, a.psi) {
                            let target = row.theta.unwrap();
                            let mu = 1.0 - l;
                            row.mse_u = Some(mse_gw(target, d, mu * mu * mo.var_difference(), mo.var_composite(l)));
                            row.mse_b = Some(mse_b(l, psi, mo.var_composite(l)));
                        }
                    }
                    None => {
                        row.lambda = Some(0.0);
                        row.theta = Some(s);
                        if let (Some(v), Some(psi)) = (a.var_synthetic_all, a.psi) {
                            row.mse_b = Some(mse_b(0.0, psi, v));
                        }
                    }
                }
            }
            est.rows.push(row);
        }
        est.rows.sort_by_key(|r| (r.estimator, r.domain_id));
    }
    Ok(lambdas)
}

/// One line of the records archive.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveRow {
    pub replicate: usize,
    pub domain_id: u32,
    pub estimator: Estimator,
    pub theta: Option<f64>,
    pub mse_u: Option<f64>,
    pub mse_b: Option<f64>,
    pub lambda: Option<f64>,
    pub n_i: usize,
}

pub const ARCHIVE_HEADER: [&str; 8] = ["replicate", "domain_id", "estimator", "theta_hat", "mse_u", "mse_b", "lambda", "n_i"];

pub fn archive_rows(records: &[ReplicateRecord]) -> Vec<ArchiveRow> {
    records
        .iter()
        .flat_map(|rec| {
            rec.estimates.rows.iter().map(move |row| ArchiveRow {
                replicate: rec.replicate,
                domain_id: row.domain_id,
                estimator: row.estimator,
                theta: row.theta,
                mse_u: row.mse_u,
                mse_b: row.mse_b,
                lambda: row.lambda,
                n_i: rec.estimates.n_i[row.domain_id as usize - 1],
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "NA" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("bad number '{s}': {e}"))
    }
}

/// Writes `replicate,domain_id,estimator,theta_hat,mse_u,mse_b,lambda,n_i`
/// with `NA` for missing cells.
pub fn write_archive(path: &Path, rows: &[ArchiveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ARCHIVE_HEADER)?;
    for r in rows {
        w.write_record([
            r.replicate.to_string(),
            r.domain_id.to_string(),
            r.estimator.label().to_string(),
            fmt_opt(r.theta),
            fmt_opt(r.mse_u),
            fmt_opt(r.mse_b),
            fmt_opt(r.lambda),
            r.n_i.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Vec<ArchiveRow>> {
    let file = path.to_path_buf();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ARCHIVE_HEADER {
        return Err(Error::MalformedRow {
            file,
            row: 1,
            message: format!("expected header {}", ARCHIVE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::MalformedRow {
            file: file.clone(),
            row: k + 2,
            message,
        };
        let int = |j: usize| rec[j].parse::<u64>().map_err(|e| bad(format!("column {}: {e}", ARCHIVE_HEADER[j])));
        let opt = |j: usize| parse_opt(&rec[j]).map_err(&bad);
        out.push(ArchiveRow {
            replicate: int(0)? as usize,
            domain_id: int(1)? as u32,
            estimator: rec[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            theta: opt(3)?,
            mse_u: opt(4)?,
            mse_b: opt(5)?,
            lambda: opt(6)?,
            n_i: int(7)? as usize,
        });
    }
    Ok(out)
}

/// `domain_id,method,lambda,theta_hat,mse_u_raw,mse_u_clamped,mse_b`
pub fn write_estimates(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain_id", "method", "lambda", "theta_hat", "mse_u_raw", "mse_u_clamped", "mse_b"])?;
    for r in rows {
        w.write_record([
            r.domain_id.to_string(),
            r.estimator.label().to_string(),
            fmt_opt(r.lambda),
            fmt_opt(r.theta),
            fmt_opt(r.mse_u),
            fmt_opt(r.mse_u.map(|v| v.max(0.0))),
            fmt_opt(r.mse_b),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(RMSE, AB)` of `values` around `truth`.
pub fn rmse_ab(values: &[f64], truth: f64) -> (f64, f64) {
    let r = values.len() as f64;
    let mse = values.iter().map(|v| (v - truth) * (v - truth)).sum::<f64>() / r;
    let mean = values.iter().sum::<f64>() / r;
    (mse.sqrt(), (mean - truth).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeClasses {
    pub expected: Vec<f64>,
    pub class: Vec<SizeClass>,
    /// Largest `n̄_i` of the small and medium classes.
    pub thresholds: Option<(f64, f64)>,
}

/// Splits domains into three equal groups by expected sample size, ties
/// broken by domain order. With `M < 3` every domain is `Medium`.
pub fn classify_domains(expected: &[f64]) -> SizeClasses {
    let m = expected.len();
    if m < 3 {
        log::warn!("fewer than 3 domains; size classes collapsed into one");
        return SizeClasses {
            expected: expected.to_vec(),
            class: vec![SizeClass::Medium; m],
            thresholds: None,
        };
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| expected[a].total_cmp(&expected[b]).then(a.cmp(&b)));
    let (k, rem) = (m / 3, m % 3);
    let n_small = k + usize::from(rem > 0);
    let n_medium = k + usize::from(rem > 1);
    let mut class = vec![SizeClass::Large; m];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_small {
            class[i] = SizeClass::Small;
        } else if rank < n_small + n_medium {
            class[i] = SizeClass::Medium;
        }
    }
    SizeClasses {
        expected: expected.to_vec(),
        class,
        thresholds: Some((expected[order[n_small - 1]], expected[order[n_small + n_medium - 1]])),
    }
}

/// Expected person sample size per domain under household PPS:
/// `n' Σ_{l∈U_i} h_l² / N`.
pub fn expected_sample_sizes(pop: &Population, n_households: usize) -> Vec<f64> {
    let mut out = vec![0.0; pop.n_domains()];
    let n = pop.size() as f64;
    for hh in pop.households() {
        let h = hh.size() as f64;
        out[hh.domain_id as usize - 1] += n_households as f64 * h * h / n;
    }
    out
}

/// Mean realized `n_i` over the archive's replicates.
pub fn empirical_sample_sizes(rows: &[ArchiveRow], m: usize) -> Vec<f64> {
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    let mut seen = std::collections::HashSet::new();
    for r in rows {
        if seen.insert((r.replicate, r.domain_id)) {
            sum[r.domain_id as usize - 1] += r.n_i as f64;
            count[r.domain_id as usize - 1] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowKind {
    Point,
    MseU,
    MseB,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainAccuracy {
    pub rmse: f64,
    pub ab: f64,
    /// Replicates with a value.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub estimator: Estimator,
    pub kind: RowKind,
    pub per_domain: Vec<Option<DomainAccuracy>>,
    /// `(RMSE, AB)` averaged over domains for any, small, medium, large.
    pub summary: [Option<(f64, f64)>; 4],
}

impl AccuracyRow {
    pub fn label(&self) -> String {
        match (self.kind, self.estimator) {
            (RowKind::Point, e) => e.label().to_string(),
            (RowKind::MseU, Estimator::Fh) => "mse(FH)".to_string(),
            (RowKind::MseU, e) => format!("mse_u({e})"),
            (RowKind::MseB, e) => format!("mse_b({e})"),
        }
    }

    pub fn any(&self) -> Option<(f64, f64)> {
        self.summary[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub classes: SizeClasses,
    pub replicates: usize,
}

impl AccuracyReport {
    pub fn row(&self, estimator: Estimator, kind: RowKind) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.kind == kind)
    }
}

fn summarize(per_domain: &[Option<DomainAccuracy>], classes: &SizeClasses) -> [Option<(f64, f64)>; 4] {
    let groups = [None, Some(SizeClass::Small), Some(SizeClass::Medium), Some(SizeClass::Large)];
    groups.map(|g| {
        let cells: Vec<&DomainAccuracy> = per_domain
            .iter()
            .zip(&classes.class)
            .filter(|(_, c)| g.is_none_or(|g| **c == g))
            .filter_map(|(a, _)| a.as_ref())
            .collect();
        (!cells.is_empty()).then(|| {
            let n = cells.len() as f64;
            (
                cells.iter().map(|a| a.rmse).sum::<f64>() / n,
                cells.iter().map(|a| a.ab).sum::<f64>() / n,
            )
        })
    })
}

/// RMSE and AB per estimator and domain over the archive. MSE-estimator
/// rows are compared with the empirical MSE of their target estimator in
/// the same archive. Missing cells are skipped; `count` records how many
/// replicates contributed.
pub fn accuracy(rows: &[ArchiveRow], truths: &[f64], classes: &SizeClasses) -> AccuracyReport {
    let m = truths.len();
    let mut estimators: Vec<Estimator> = rows.iter().map(|r| r.estimator).collect();
    estimators.sort();
    estimators.dedup();
    let replicates = rows.iter().map(|r| r.replicate).collect::<std::collections::HashSet<_>>().len();

    type Pick = fn(&ArchiveRow) -> Option<f64>;
    let pick_theta: Pick = |r| r.theta;
    let pick_u: Pick = |r| r.mse_u;
    let pick_b: Pick = |r| r.mse_b;
    let gather = |est: Estimator, pick: Pick| -> Vec<Vec<f64>> {
        let mut v = vec![Vec::new(); m];
        for r in rows.iter().filter(|r| r.estimator == est) {
            if let Some(x) = pick(r) {
                v[r.domain_id as usize - 1].push(x);
            }
        }
        v
    };
    let cells = |values: &[Vec<f64>], truth: &[f64]| -> Vec<Option<DomainAccuracy>> {
        values
            .iter()
            .zip(truth)
            .map(|(v, &t)| {
                (!v.is_empty()).then(|| {
                    let (rmse, ab) = rmse_ab(v, t);
                    DomainAccuracy { rmse, ab, count: v.len() }
                })
            })
            .collect()
    };

    let mut point_rows = Vec::new();
    let mut mse_rows = Vec::new();
    for &est in &estimators {
        let theta = gather(est, pick_theta);
        let per_domain = cells(&theta, truths);
        let empirical_mse: Vec<f64> = theta
            .iter()
            .zip(truths)
            .map(|(v, &t)| v.iter().map(|x| (x - t) * (x - t)).sum::<f64>() / v.len().max(1) as f64)
            .collect();
        point_rows.push(AccuracyRow {
            estimator: est,
            kind: RowKind::Point,
            summary: summarize(&per_domain, classes),
            per_domain,
        });
        for (kind, pick) in [(RowKind::MseU, pick_u), (RowKind::MseB, pick_b)] {
            let values = gather(est, pick);
            if values.iter().all(Vec::is_empty) {
                continue;
            }
            let per_domain = cells(&values, &empirical_mse);
            mse_rows.push(AccuracyRow {
                estimator: est,
                kind,
                summary: summarize(&per_domain, classes),
                per_domain,
            });
        }
    }
    point_rows.extend(mse_rows);
    AccuracyReport {
        rows: point_rows,
        classes: classes.clone(),
        replicates,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Md,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" => Ok(ReportFormat::Md),
            other => Err(Error::invalid(format!("unknown report format '{other}'"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "any_rmse",
    "any_ab",
    "small_rmse",
    "small_ab",
    "medium_rmse",
    "medium_ab",
    "large_rmse",
    "large_ab",
];

/// Rendered table: values scaled by 100 and rounded to 4 decimals.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<(String, [Option<f64>; 8])>,
}

fn scaled(v: f64) -> f64 {
    format!("{:.4}", v * 100.0).parse().expect("formatted float parses")
}

impl ReportTable {
    pub fn from_report(report: &AccuracyReport) -> Self {
        let rows = report
            .rows
            .iter()
            .map(|r| {
                let mut vals = [None; 8];
                for (k, s) in r.summary.iter().enumerate() {
                    if let Some((rmse, ab)) = s {
                        vals[2 * k] = Some(scaled(*rmse));
                        vals[2 * k + 1] = Some(scaled(*ab));
                    }
                }
                (r.label(), vals)
            })
            .collect();
        ReportTable { rows }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        let cell = |v: &Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        match format {
            ReportFormat::Csv => {
                out.push_str("estimator,");
                out.push_str(&REPORT_COLUMNS.join(","));
                out.push('\n');
                for (label, vals) in &self.rows {
                    out.push_str(label);
                    for v in vals {
                        out.push(',');
                        out.push_str(&cell(v));
                    }
                    out.push('\n');
                }
            }
            ReportFormat::Md => {
                out.push_str("| estimator | ");
                out.push_str(&REPORT_COLUMNS.join(" | "));
                out.push_str(" |\n|---|");
                out.push_str(&"---:|".repeat(8));
                out.push('\n');
                for (label, vals) in &self.rows {
                    out.push_str("| ");
                    out.push_str(label);
                    for v in vals {
                        out.push_str(" | ");
                        out.push_str(&cell(v));
                    }
                    out.push_str(" |\n");
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() != 9 || header[0] != "estimator" || header[1..] != REPORT_COLUMNS {
            return Err(Error::invalid("not a report table"));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut vals = [None; 8];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = parse_opt(&rec[k + 1]).map_err(Error::InvalidArgument)?;
            }
            rows.push((rec[0].to_string(), vals));
        }
        Ok(ReportTable { rows })
    }
}

/// Renders the report; Markdown output carries the class thresholds and a
/// note on the truth used for MSE-estimator rows.
pub fn render_report(report: &AccuracyReport, format: ReportFormat) -> String {
    let mut out = ReportTable::from_report(report).render(format);
    if format == ReportFormat::Md {
        out.push('\n');
        out.push_str(&format!("Values ×10², R = {}.", report.replicates));
        if let Some((a, b)) = report.classes.thresholds {
            out.push_str(&format!(" Small: n̄ ≤ {a:.1}; medium: n̄ ≤ {b:.1}; large otherwise."));
        }
        out.push_str(" MSE-estimator rows are scored against the empirical MSE of their estimator over the same replicates.\n");
    }
    out
}

/// `domain_id,expected_n,class`
pub fn write_classes(path: &Path, classes: &SizeClasses) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain_id", "expected_n", "class"])?;
    for (i, (n, c)) in classes.expected.iter().zip(&classes.class).enumerate() {
        let c = match c {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        };
        w.write_record([(i + 1).to_string(), n.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the per-domain truths of `var` from a file written by
/// [`crate::population::write_truths`].
pub fn load_truths(path: &Path, var: StudyVariable) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let column = format!("theta_{}", var.name());
    let j = rdr
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::MalformedRow {
            file: path.to_path_buf(),
            row: 1,
            message: format!("missing column {column}"),
        })?;
    rdr.records()
        .enumerate()
        .map(|(k, rec)| {
            let rec = rec?;
            rec[j].parse().map_err(|e| Error::MalformedRow {
                file: path.to_path_buf(),
                row: k + 2,
                message: format!("{column}: {e}"),
            })
        })
        .collect()
}

/// Inverse of [`write_classes`].
pub fn load_classes(path: &Path) -> Result<SizeClasses> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut expected = Vec::new();
    let mut class = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::MalformedRow {
            file: path.to_path_buf(),
            row: k + 2,
            message,
        };
        expected.push(rec[1].parse::<f64>().map_err(|e| bad(e.to_string()))?);
        class.push(match &rec[2] {
            "small" => SizeClass::Small,
            "medium" => SizeClass::Medium,
            "large" => SizeClass::Large,
            other => return Err(bad(format!("unknown class '{other}'"))),
        });
    }
    let top = |c: SizeClass| {
        expected
            .iter()
            .zip(&class)
            .filter(|(_, k)| **k == c)
            .map(|(n, _)| *n)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let thresholds = class
        .contains(&SizeClass::Small)
        .then(|| (top(SizeClass::Small), top(SizeClass::Medium)));
    Ok(SizeClasses {
        expected,
        class,
        thresholds,
    })
}

/// Size classes for a run, following `config.size_classes`.
pub fn size_classes_for(pop: &Population, config: &SimConfig, rows: &[ArchiveRow]) -> SizeClasses {
    match config.size_classes {
        SizeClassMode::Analytic => classify_domains(&expected_sample_sizes(pop, config.n_households)),
        SizeClassMode::Empirical => classify_domains(&empirical_sample_sizes(rows, pop.n_domains())),
    }
}
