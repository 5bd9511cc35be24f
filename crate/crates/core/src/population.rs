//! Finite survey population: persons, households, domains and their
//! covariates, plus a synthetic generator imitating a labor force survey
//! frame.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of covariates per domain including the leading intercept.
pub const N_COVARIATES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LaborStatus {
    Unemployed,
    Employed,
    NotInLaborForce,
}

impl LaborStatus {
    pub fn code(self) -> &'static str {
        match self {
            LaborStatus::Unemployed => "U",
            LaborStatus::Employed => "E",
            LaborStatus::NotInLaborForce => "N",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "U" => Some(LaborStatus::Unemployed),
            "E" => Some(LaborStatus::Employed),
            "N" => Some(LaborStatus::NotInLaborForce),
            _ => None,
        }
    }
}

/// Binary study variables derived from the labor status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyVariable {
    Unemployed,
    Employed,
}

impl StudyVariable {
    pub const ALL: [StudyVariable; 2] = [StudyVariable::Unemployed, StudyVariable::Employed];

    pub fn name(self) -> &'static str {
        match self {
            StudyVariable::Unemployed => "unemployed",
            StudyVariable::Employed => "employed",
        }
    }

    pub fn indicator(self, status: LaborStatus) -> f64 {
        let hit = matches!(
            (self, status),
            (StudyVariable::Unemployed, LaborStatus::Unemployed)
                | (StudyVariable::Employed, LaborStatus::Employed)
        );
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for StudyVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unemployed" | "u" => Ok(StudyVariable::Unemployed),
            "employed" | "e" => Ok(StudyVariable::Employed),
            other => Err(Error::invalid(format!("unknown study variable `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Person {
    pub id: u64,
    pub household_id: u64,
    pub domain_id: u32,
    pub status: LaborStatus,
}

impl Person {
    pub fn y(&self, var: StudyVariable) -> f64 {
        var.indicator(self.status)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Household {
    pub id: u64,
    pub domain_id: u32,
    /// Indices into [`Population::persons`].
    pub members: Vec<usize>,
}

impl Household {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Persons grouped into households and `M` domains with ids `1..=M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    persons: Vec<Person>,
    households: Vec<Household>,
    n_domains: usize,
}

impl Population {
    /// Rebuilds households from person records. Households are ordered by
    /// first appearance of their id.
    pub fn from_persons(persons: Vec<Person>, n_domains: usize) -> Result<Self> {
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut households: Vec<Household> = Vec::new();
        let mut seen_person: HashMap<u64, usize> = HashMap::with_capacity(persons.len());
        let mut domain_count = vec![0usize; n_domains];

        for (k, p) in persons.iter().enumerate() {
            if p.domain_id == 0 || p.domain_id as usize > n_domains {
                return Err(Error::invalid(format!(
                    "person {} has domain id {} outside 1..={n_domains}",
                    p.id, p.domain_id
                )));
            }
            if seen_person.insert(p.id, k).is_some() {
                return Err(Error::invalid(format!("duplicate person id {}", p.id)));
            }
            domain_count[p.domain_id as usize - 1] += 1;
            match index.get(&p.household_id) {
                Some(&h) => {
                    let hh = &mut households[h];
                    if hh.domain_id != p.domain_id {
                        return Err(Error::InconsistentHousehold {
                            household: p.household_id,
                            message: format!(
                                "person {} is in domain {} but the household is in domain {}",
                                p.id, p.domain_id, hh.domain_id
                            ),
                        });
                    }
                    hh.members.push(k);
                }
                None => {
                    index.insert(p.household_id, households.len());
                    households.push(Household {
                        id: p.household_id,
                        domain_id: p.domain_id,
                        members: vec![k],
                    });
                }
            }
        }
        if let Some(i) = domain_count.iter().position(|&c| c == 0) {
            return Err(Error::EmptyDomain(i as u32 + 1));
        }
        Ok(Population {
            persons,
            households,
            n_domains,
        })
    }

    pub fn persons(&self) -> &[Person] {
        &self.persons
    }

    pub fn households(&self) -> &[Household] {
        &self.households
    }

    /// Total person count `N`.
    pub fn size(&self) -> usize {
        self.persons.len()
    }

    /// Domain count `M`.
    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    /// Person counts `N_i`, indexed by `domain_id - 1`.
    pub fn domain_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_domains];
        for p in &self.persons {
            sizes[p.domain_id as usize - 1] += 1;
        }
        sizes
    }

    /// Count of persons with `y = 1` for `var`.
    pub fn total(&self, var: StudyVariable) -> usize {
        self.persons.iter().filter(|p| p.y(var) == 1.0).count()
    }
}

/// True domain proportions for both study variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainTruth {
    pub unemployed: f64,
    pub employed: f64,
}

impl DomainTruth {
    pub fn get(&self, var: StudyVariable) -> f64 {
        match var {
            StudyVariable::Unemployed => self.unemployed,
            StudyVariable::Employed => self.employed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub id: u32,
    /// `N_i`.
    pub size: usize,
    /// Covariates with `z[0] == 1`.
    pub z: Vec<f64>,
    pub theta: DomainTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainFrame {
    pub domains: Vec<Domain>,
}

impl DomainFrame {
    /// Builds the frame from the population and covariate rows `(z2..z6)`
    /// indexed by `domain_id - 1`. Truths are always recomputed from the
    /// microdata.
    pub fn new(pop: &Population, covariates: &[[f64; N_COVARIATES - 1]]) -> Result<Self> {
        if covariates.len() != pop.n_domains() {
            return Err(Error::MissingCovariates(covariates.len() as u32 + 1));
        }
        let sizes = pop.domain_sizes();
        let truths = domain_truths(pop);
        let domains = (0..pop.n_domains())
            .map(|i| {
                let mut z = Vec::with_capacity(N_COVARIATES);
                z.push(1.0);
                z.extend_from_slice(&covariates[i]);
                Domain {
                    id: i as u32 + 1,
                    size: sizes[i],
                    z,
                    theta: truths[i],
                }
            })
            .collect();
        Ok(DomainFrame { domains })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.domains.iter().map(|d| d.size as f64).collect()
    }

    pub fn truths(&self, var: StudyVariable) -> Vec<f64> {
        self.domains.iter().map(|d| d.theta.get(var)).collect()
    }

    pub fn covariate_rows(&self) -> Vec<[f64; N_COVARIATES - 1]> {
        self.domains
            .iter()
            .map(|d| {
                let mut row = [0.0; N_COVARIATES - 1];
                row.copy_from_slice(&d.z[1..]);
                row
            })
            .collect()
    }
}

/// Exact finite-population domain proportions, indexed by `domain_id - 1`.
pub fn domain_truths(pop: &Population) -> Vec<DomainTruth> {
    let m = pop.n_domains();
    let mut n = vec![0usize; m];
    let mut unemployed = vec![0usize; m];
    let mut employed = vec![0usize; m];
    for p in pop.persons() {
        let i = p.domain_id as usize - 1;
        n[i] += 1;
        match p.status {
            LaborStatus::Unemployed => unemployed[i] += 1,
            LaborStatus::Employed => employed[i] += 1,
            LaborStatus::NotInLaborForce => {}
        }
    }
    (0..m)
        .map(|i| DomainTruth {
            unemployed: unemployed[i] as f64 / n[i] as f64,
            employed: employed[i] as f64 / n[i] as f64,
        })
        .collect()
}

const PERSONS_HEADER: [&str; 4] = ["person_id", "household_id", "domain_id", "labor_status"];
const COVARIATES_HEADER: [&str; 6] = ["domain_id", "z2", "z3", "z4", "z5", "z6"];

fn check_header(file: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::MalformedRow {
            file: file.to_path_buf(),
            row: 1,
            message: format!("expected header `{}`, found `{}`", want.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_field<T: FromStr>(file: &Path, row: usize, name: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::MalformedRow {
        file: file.to_path_buf(),
        row,
        message: format!("cannot parse {name} from `{value}`"),
    })
}

/// Reads `covariates.csv`; rows come back indexed by `domain_id - 1`.
pub fn load_covariates(path: &Path) -> Result<Vec<[f64; N_COVARIATES - 1]>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    check_header(path, rdr.headers()?, &COVARIATES_HEADER)?;
    let mut rows: Vec<(u32, usize, [f64; N_COVARIATES - 1])> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        if rec.len() != COVARIATES_HEADER.len() {
            return Err(Error::MalformedRow {
                file: path.to_path_buf(),
                row: line,
                message: format!("expected {} fields, found {}", COVARIATES_HEADER.len(), rec.len()),
            });
        }
        let id: u32 = parse_field(path, line, "domain_id", &rec[0])?;
        let mut z = [0.0; N_COVARIATES - 1];
        for (j, zj) in z.iter_mut().enumerate() {
            let v: f64 = parse_field(path, line, COVARIATES_HEADER[j + 1], &rec[j + 1])?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::MalformedRow {
                    file: path.to_path_buf(),
                    row: line,
                    message: format!("{} = {v} is not a proportion", COVARIATES_HEADER[j + 1]),
                });
            }
            *zj = v;
        }
        rows.push((id, line, z));
    }
    let m = rows.len();
    let mut out: Vec<Option<[f64; N_COVARIATES - 1]>> = vec![None; m];
    for (id, line, z) in rows {
        if id == 0 || id as usize > m {
            return Err(Error::MalformedRow {
                file: path.to_path_buf(),
                row: line,
                message: format!("domain ids must be 1..={m}, found {id}"),
            });
        }
        let slot = &mut out[id as usize - 1];
        if slot.is_some() {
            return Err(Error::MalformedRow {
                file: path.to_path_buf(),
                row: line,
                message: format!("duplicate covariate row for domain {id}"),
            });
        }
        *slot = Some(z);
    }
    // ids are in 1..=m and unique, so every slot is filled
    Ok(out.into_iter().map(|z| z.expect("filled")).collect())
}

/// Loads a population from `persons.csv` and `covariates.csv`.
pub fn load_population(persons_path: &Path, covariates_path: &Path) -> Result<(Population, DomainFrame)> {
    let covariates = load_covariates(covariates_path)?;
    let m = covariates.len();
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(persons_path)?;
    check_header(persons_path, rdr.headers()?, &PERSONS_HEADER)?;
    let mut persons = Vec::new();
    let mut seen = vec![false; m];
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        if rec.len() != PERSONS_HEADER.len() {
            return Err(Error::MalformedRow {
                file: persons_path.to_path_buf(),
                row: line,
                message: format!("expected {} fields, found {}", PERSONS_HEADER.len(), rec.len()),
            });
        }
        let id: u64 = parse_field(persons_path, line, "person_id", &rec[0])?;
        let household_id: u64 = parse_field(persons_path, line, "household_id", &rec[1])?;
        let domain_id: u32 = parse_field(persons_path, line, "domain_id", &rec[2])?;
        let status = LaborStatus::from_code(rec[3].trim()).ok_or_else(|| Error::MalformedRow {
            file: persons_path.to_path_buf(),
            row: line,
            message: format!("labor_status must be U, E or N, found `{}`", &rec[3]),
        })?;
        if domain_id == 0 || domain_id as usize > m {
            return Err(Error::UnknownDomain {
                file: persons_path.to_path_buf(),
                row: line,
                domain: domain_id,
            });
        }
        seen[domain_id as usize - 1] = true;
        persons.push(Person {
            id,
            household_id,
            domain_id,
            status,
        });
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyDomain(i as u32 + 1));
    }
    let pop = Population::from_persons(persons, m)?;
    let frame = DomainFrame::new(&pop, &covariates)?;
    Ok((pop, frame))
}

/// Writes `persons.csv` and `covariates.csv`; inverse of [`load_population`].
pub fn write_population(
    pop: &Population,
    frame: &DomainFrame,
    persons_path: &Path,
    covariates_path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(persons_path)?;
    w.write_record(PERSONS_HEADER)?;
    for p in pop.persons() {
        w.write_record([
            p.id.to_string(),
            p.household_id.to_string(),
            p.domain_id.to_string(),
            p.status.code().to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(covariates_path)?;
    w.write_record(COVARIATES_HEADER)?;
    for d in &frame.domains {
        let mut row = vec![d.id.to_string()];
        row.extend(d.z[1..].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Domain-level truth export: `domain_id,N_i,theta_unemployed,theta_employed`.
pub fn write_truths(frame: &DomainFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain_id", "N_i", "theta_unemployed", "theta_employed"])?;
    for d in &frame.domains {
        w.write_record([
            d.id.to_string(),
            d.size.to_string(),
            d.theta.unemployed.to_string(),
            d.theta.employed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Five-number summary of true employed proportions the generator imitates.
pub const EMPLOYED_FIVE_NUMBERS: [f64; 5] = [0.379, 0.585, 0.634, 0.668, 0.766];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub m_domains: usize,
    pub population_size: usize,
    pub household_size_max: usize,
    /// Success probability of the truncated geometric household-size law.
    pub household_size_p: f64,
    /// Relative domain sizes are drawn uniformly from `1 ± spread`.
    pub domain_size_spread: f64,
    pub unemployed_range: (f64, f64),
    pub employed_range: (f64, f64),
    /// Strength in `[0, 1]` linking `z2`/`z3` to the true proportions.
    pub covariate_correlation: f64,
    /// Domains below this true unemployed fraction are redrawn.
    pub min_unemployed_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            m_domains: 30,
            population_size: 50_000,
            household_size_max: 6,
            household_size_p: 0.4,
            domain_size_spread: 0.6,
            unemployed_range: (0.01, 0.10),
            employed_range: (EMPLOYED_FIVE_NUMBERS[0], EMPLOYED_FIVE_NUMBERS[4]),
            covariate_correlation: 0.8,
            min_unemployed_fraction: 0.0,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m_domains == 0 {
            return bad("m_domains must be positive".into());
        }
        if self.population_size < self.m_domains {
            return bad("population_size must be at least m_domains".into());
        }
        if self.household_size_max == 0 {
            return bad("household_size_max must be positive".into());
        }
        if !(self.household_size_p > 0.0 && self.household_size_p <= 1.0) {
            return bad("household_size_p must be in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.domain_size_spread) {
            return bad("domain_size_spread must be in [0, 1)".into());
        }
        for (name, (lo, hi)) in [
            ("unemployed_range", self.unemployed_range),
            ("employed_range", self.employed_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{name} ({lo}, {hi}) is empty or outside [0, 1]"));
            }
        }
        if self.unemployed_range.1 + self.employed_range.1 > 1.0 {
            return bad("unemployed and employed upper bounds sum above 1".into());
        }
        if !(0.0..=1.0).contains(&self.covariate_correlation) {
            return bad("covariate_correlation must be in [0, 1]".into());
        }
        if self.min_unemployed_fraction > self.unemployed_range.1 {
            return bad("min_unemployed_fraction exceeds the unemployed range".into());
        }
        Ok(())
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Piecewise-linear quantile function through the employed five-number
/// summary, rescaled so its ends hit `range`.
fn employed_quantile(u: f64, range: (f64, f64)) -> f64 {
    let (a, b) = (EMPLOYED_FIVE_NUMBERS[0], EMPLOYED_FIVE_NUMBERS[4]);
    let knots = EMPLOYED_FIVE_NUMBERS.map(|q| range.0 + (q - a) / (b - a) * (range.1 - range.0));
    let pos = (u.clamp(0.0, 1.0) * 4.0).min(4.0 - 1e-12);
    let j = pos.floor() as usize;
    let t = pos - j as f64;
    knots[j] + t * (knots[j + 1] - knots[j])
}

fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn household_size<R: Rng>(rng: &mut R, p: f64, max: usize) -> usize {
    // inverse-CDF draw from the geometric law truncated to 1..=max
    let q = 1.0 - p;
    let mass = 1.0 - q.powi(max as i32);
    let u: f64 = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    let mut prob = p;
    for h in 1..=max {
        cum += prob;
        if u < cum {
            return h;
        }
        prob *= q;
    }
    max
}

/// Builds a deterministic synthetic population from `config` and `seed`.
///
/// Domain sizes are apportioned exactly to `population_size`. True
/// unemployed proportions are uniform on the configured range; employed
/// proportions follow a piecewise-linear quantile function through
/// [`EMPLOYED_FIVE_NUMBERS`]. `z2` (registered-unemployed analog) and `z3`
/// (social-contribution analog) are linked to the truths with strength
/// `covariate_correlation`, `z4..z6` weakly.
pub fn generate_synthetic_population(config: &GeneratorConfig, seed: u64) -> Result<(Population, DomainFrame)> {
    config.validate()?;
    let m = config.m_domains;
    let rho = config.covariate_correlation;
    let weak = 0.2 * rho;
    let mut rng = rng::stream(rng::derive_seed(seed, 0x9e9), 0);

    let shares: Vec<f64> = (0..m)
        .map(|_| 1.0 + config.domain_size_spread * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let sizes = largest_remainder(config.population_size, &shares);
    if sizes.contains(&0) {
        return Err(Error::InvalidConfig(
            "population_size too small for m_domains: a domain would be empty".into(),
        ));
    }

    let (ulo, uhi) = config.unemployed_range;
    let ulo_eff = ulo.max(config.min_unemployed_fraction);
    let (elo, ehi) = config.employed_range;
    let sd12 = 12f64.sqrt();

    let mut persons = Vec::with_capacity(config.population_size);
    let mut covariates = Vec::with_capacity(m);
    let mut next_household = 1u64;

    for (i, &n_i) in sizes.iter().enumerate() {
        let domain_id = i as u32 + 1;
        let xu: f64 = rng.random();
        let xe: f64 = rng.random();
        let e: [f64; 5] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let theta_u = ulo_eff + (uhi - ulo_eff) * xu;
        let theta_e = employed_quantile(xe, config.employed_range);

        let su = (xu - 0.5) * sd12;
        let se = (xe - 0.5) * sd12;
        let mixed = |r: f64, signal: f64, noise: f64| r * signal + (1.0 - r * r).sqrt() * noise;
        covariates.push([
            clamp01(0.8 * 0.5 * (ulo + uhi) + 0.25 * (uhi - ulo) * mixed(rho, su, e[0])),
            clamp01(0.9 * 0.5 * (elo + ehi) + 0.25 * (ehi - elo) * mixed(rho, se, e[1])),
            clamp01(0.48 + 0.01 * mixed(weak, su, e[2])),
            clamp01(0.20 + 0.02 * mixed(weak, se, e[3])),
            clamp01(0.22 + 0.02 * mixed(weak, se, e[4])),
        ]);

        let k_u = (theta_u * n_i as f64).round() as usize;
        let k_e = ((theta_e * n_i as f64).round() as usize).min(n_i - k_u.min(n_i));
        let mut statuses: Vec<LaborStatus> = (0..n_i)
            .map(|k| {
                if k < k_u {
                    LaborStatus::Unemployed
                } else if k < k_u + k_e {
                    LaborStatus::Employed
                } else {
                    LaborStatus::NotInLaborForce
                }
            })
            .collect();
        statuses.shuffle(&mut rng);

        let mut placed = 0;
        while placed < n_i {
            let h = household_size(&mut rng, config.household_size_p, config.household_size_max).min(n_i - placed);
            for status in &statuses[placed..placed + h] {
                persons.push(Person {
                    id: persons.len() as u64 + 1,
                    household_id: next_household,
                    domain_id,
                    status: *status,
                });
            }
            next_household += 1;
            placed += h;
        }
    }

    let pop = Population::from_persons(persons, m)?;
    let frame = DomainFrame::new(&pop, &covariates)?;
    Ok((pop, frame))
}
