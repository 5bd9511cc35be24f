//! Household sampling with probability proportional to household size.
//!
//! Households are drawn by randomized-order systematic PPS. Every member
//! of a selected household enters the sample and carries the person-level
//! weight `w_k = N / (h_l n')`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::population::{Population, StudyVariable};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PpsScheme {
    #[default]
    SystematicRandomOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleDesignConfig {
    /// `n'`, the number of households drawn.
    pub n_households: usize,
    pub scheme: PpsScheme,
    pub seed: u64,
}

impl SampleDesignConfig {
    pub fn new(n_households: usize, seed: u64) -> Self {
        SampleDesignConfig {
            n_households,
            scheme: PpsScheme::SystematicRandomOrder,
            seed,
        }
    }

    pub fn validate(&self, pop: &Population) -> Result<()> {
        let h = pop.households().len();
        if self.n_households == 0 || self.n_households > h {
            return Err(Error::InvalidConfig(format!(
                "n_households = {} must be in 1..={h}",
                self.n_households
            )));
        }
        let n = pop.size();
        let certain: Vec<u64> = pop
            .households()
            .iter()
            .filter(|hh| hh.size() * self.n_households >= n && self.n_households < h)
            .map(|hh| hh.id)
            .collect();
        if !certain.is_empty() {
            return Err(Error::CertaintyInclusion(certain));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledHousehold {
    pub id: u64,
    pub domain_id: u32,
    pub size: usize,
    /// Design weight shared by all members.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPerson {
    pub person_id: u64,
    pub household_id: u64,
    pub domain_id: u32,
    /// Position of the person's household in [`Sample::households`].
    pub household: usize,
    pub weight: f64,
    pub y_unemployed: f64,
    pub y_employed: f64,
}

impl SampledPerson {
    pub fn y(&self, var: StudyVariable) -> f64 {
        match var {
            StudyVariable::Unemployed => self.y_unemployed,
            StudyVariable::Employed => self.y_employed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub households: Vec<SampledHousehold>,
    pub persons: Vec<SampledPerson>,
    domain_index: Vec<Vec<usize>>,
}

impl Sample {
    /// Assembles a sample from person records; households are ordered by
    /// first appearance.
    pub fn from_persons(records: Vec<SampledPerson>, n_domains: usize) -> Result<Self> {
        let mut persons = records;
        let mut households: Vec<SampledHousehold> = Vec::new();
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut domain_index = vec![Vec::new(); n_domains];
        for (k, p) in persons.iter_mut().enumerate() {
            if p.domain_id == 0 || p.domain_id as usize > n_domains {
                return Err(Error::invalid(format!(
                    "sampled person {} has domain {} outside 1..={n_domains}",
                    p.person_id, p.domain_id
                )));
            }
            let h = *index.entry(p.household_id).or_insert_with(|| {
                households.push(SampledHousehold {
                    id: p.household_id,
                    domain_id: p.domain_id,
                    size: 0,
                    weight: p.weight,
                });
                households.len() - 1
            });
            let hh = &mut households[h];
            if hh.domain_id != p.domain_id || hh.weight != p.weight {
                return Err(Error::InconsistentHousehold {
                    household: p.household_id,
                    message: "members disagree on domain or weight".into(),
                });
            }
            hh.size += 1;
            p.household = h;
            domain_index[p.domain_id as usize - 1].push(k);
        }
        Ok(Sample {
            households,
            persons,
            domain_index,
        })
    }

    pub fn n_households(&self) -> usize {
        self.households.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_index.len()
    }

    /// Person indices of the domain sample `s_i` (0-based domain index).
    pub fn domain_persons(&self, domain: usize) -> &[usize] {
        &self.domain_index[domain]
    }

    /// Realized sizes `n_i`.
    pub fn domain_sample_sizes(&self) -> Vec<usize> {
        self.domain_index.iter().map(Vec::len).collect()
    }

    pub fn design_weights(&self) -> Vec<f64> {
        self.persons.iter().map(|p| p.weight).collect()
    }

    /// Expands household-level weights to persons.
    pub fn person_weights(&self, household_weights: &[f64]) -> Vec<f64> {
        self.persons.iter().map(|p| household_weights[p.household]).collect()
    }

    /// `person_id,domain_id,household_id,weight,y_unemployed,y_employed`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(SAMPLE_HEADER)?;
        for p in &self.persons {
            w.write_record([
                p.person_id.to_string(),
                p.domain_id.to_string(),
                p.household_id.to_string(),
                p.weight.to_string(),
                (p.y_unemployed as u8).to_string(),
                (p.y_employed as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path, n_domains: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header != SAMPLE_HEADER {
            return Err(Error::MalformedRow {
                file: path.to_path_buf(),
                row: 1,
                message: format!("expected header `{}`", SAMPLE_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::MalformedRow {
                file: path.to_path_buf(),
                row: idx + 2,
                message: format!("cannot parse {what}"),
            };
            let flag = |s: &str, what: &str| match s.trim() {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                _ => Err(bad(what)),
            };
            let p = SampledPerson {
                person_id: rec[0].trim().parse().map_err(|_| bad("person_id"))?,
                domain_id: rec[1].trim().parse().map_err(|_| bad("domain_id"))?,
                household_id: rec[2].trim().parse().map_err(|_| bad("household_id"))?,
                household: 0,
                weight: rec[3].trim().parse().map_err(|_| bad("weight"))?,
                y_unemployed: flag(&rec[4], "y_unemployed")?,
                y_employed: flag(&rec[5], "y_employed")?,
            };
            if p.y_unemployed + p.y_employed > 1.0 {
                return Err(bad("labor status: both indicators are 1"));
            }
            if !(p.weight > 0.0) {
                return Err(bad("weight: must be positive"));
            }
            records.push(p);
        }
        Sample::from_persons(records, n_domains)
    }
}

const SAMPLE_HEADER: [&str; 6] = [
    "person_id",
    "domain_id",
    "household_id",
    "weight",
    "y_unemployed",
    "y_employed",
];

/// Person inclusion probabilities `π_k = h_l n' / N`, aligned with
/// [`Population::persons`].
pub fn inclusion_probabilities(pop: &Population, config: &SampleDesignConfig) -> Result<Vec<f64>> {
    config.validate(pop)?;
    let n = pop.size() as f64;
    let census = config.n_households == pop.households().len();
    let mut pi = vec![0.0; pop.size()];
    for hh in pop.households() {
        let p = if census {
            1.0
        } else {
            hh.size() as f64 * config.n_households as f64 / n
        };
        for &k in &hh.members {
            pi[k] = p;
        }
    }
    Ok(pi)
}

/// Indices of the households picked by randomized-order systematic PPS.
///
/// Household `l` occupies `h_l n'` units on a line of length `N n'`; the
/// `n'` selection points are `u + jN` with `u ~ U[0, N)`.
fn systematic_pps<R: Rng>(sizes: &[usize], n_select: usize, rng: &mut R) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(rng);
    let start = rng.random::<f64>() * total as f64;
    let mut chosen = Vec::with_capacity(n_select);
    let mut upper = 0.0;
    let mut j = 0usize;
    for &l in &order {
        upper += (sizes[l] * n_select) as f64;
        let mut hit = false;
        while j < n_select && start + ((j * total) as f64) < upper {
            hit = true;
            j += 1;
        }
        if hit {
            chosen.push(l);
        }
        if j == n_select {
            break;
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Draws a household sample; deterministic given `config.seed`.
///
/// Selecting every household is a census and gets unit weights.
pub fn draw_sample(pop: &Population, config: &SampleDesignConfig) -> Result<Sample> {
    let mut rng = rng::stream(config.seed, 0);
    draw_sample_with(pop, config, &mut rng)
}

pub(crate) fn draw_sample_with<R: Rng>(pop: &Population, config: &SampleDesignConfig, rng: &mut R) -> Result<Sample> {
    config.validate(pop)?;
    let sizes: Vec<usize> = pop.households().iter().map(|h| h.size()).collect();
    let census = config.n_households == sizes.len();
    let chosen = if census {
        (0..sizes.len()).collect()
    } else {
        systematic_pps(&sizes, config.n_households, rng)
    };
    let n = pop.size() as f64;
    let n_prime = config.n_households as f64;
    let mut records = Vec::new();
    for &l in &chosen {
        let hh = &pop.households()[l];
        let weight = if census {
            1.0
        } else {
            n / (hh.size() as f64 * n_prime)
        };
        for &k in &hh.members {
            let p = &pop.persons()[k];
            records.push(SampledPerson {
                person_id: p.id,
                household_id: hh.id,
                domain_id: hh.domain_id,
                household: 0,
                weight,
                y_unemployed: p.y(StudyVariable::Unemployed),
                y_employed: p.y(StudyVariable::Employed),
            });
        }
    }
    Sample::from_persons(records, pop.n_domains())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairwiseMode {
    IndependentApproximation,
    ExhaustiveTinyDesign,
}

/// First- and second-order inclusion probabilities indexed by unit label.
#[derive(Clone, Debug)]
pub struct PairwiseProbabilityProvider {
    first: Vec<f64>,
    joint: Option<Vec<Vec<f64>>>,
}

impl PairwiseProbabilityProvider {
    /// `π_kl = π_k π_l` for `k != l`.
    pub fn independent(first: Vec<f64>) -> Self {
        PairwiseProbabilityProvider { first, joint: None }
    }

    /// Exact probabilities from an exhaustive list of equally likely
    /// samples over units `0..n_units`.
    pub fn from_enumeration(n_units: usize, samples: &[Vec<usize>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no samples to enumerate"));
        }
        let mut joint = vec![vec![0.0; n_units]; n_units];
        for s in samples {
            for &k in s {
                for &l in s {
                    joint[k][l] += 1.0;
                }
            }
        }
        let count = samples.len() as f64;
        for row in joint.iter_mut() {
            for v in row.iter_mut() {
                *v /= count;
            }
        }
        let first = (0..n_units).map(|k| joint[k][k]).collect();
        Ok(PairwiseProbabilityProvider {
            first,
            joint: Some(joint),
        })
    }

    /// Simple random sampling without replacement of `n` from `n_pop`,
    /// enumerated exhaustively. Restricted to `n_pop <= 8`, `n <= 4`.
    pub fn srswor_exhaustive(n_pop: usize, n: usize) -> Result<Self> {
        if n_pop > 8 || n > 4 || n == 0 || n > n_pop {
            return Err(Error::invalid(format!(
                "exhaustive mode supports N <= 8, 1 <= n <= 4 (got N={n_pop}, n={n})"
            )));
        }
        Self::from_enumeration(n_pop, &combinations(n_pop, n))
    }

    pub fn mode(&self) -> PairwiseMode {
        if self.joint.is_some() {
            PairwiseMode::ExhaustiveTinyDesign
        } else {
            PairwiseMode::IndependentApproximation
        }
    }

    pub fn first(&self, k: usize) -> f64 {
        self.first[k]
    }

    pub fn joint(&self, k: usize, l: usize) -> f64 {
        match &self.joint {
            Some(j) => j[k][l],
            None if k == l => self.first[k],
            None => self.first[k] * self.first[l],
        }
    }
}

/// All `n`-subsets of `0..n_pop` in lexicographic order.
pub fn combinations(n_pop: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n_pop: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for k in start..=n_pop - left {
            cur.push(k);
            rec(k + 1, n_pop, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n <= n_pop {
        rec(0, n_pop, n, &mut Vec::new(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{LaborStatus, Person};

    fn pop_with_sizes(sizes: &[usize]) -> Population {
        let mut persons = Vec::new();
        for (l, &h) in sizes.iter().enumerate() {
            for _ in 0..h {
                persons.push(Person {
                    id: persons.len() as u64 + 1,
                    household_id: l as u64 + 1,
                    domain_id: 1,
                    status: LaborStatus::Employed,
                });
            }
        }
        Population::from_persons(persons, 1).unwrap()
    }

    #[test]
    fn census_has_unit_weights() {
        let pop = pop_with_sizes(&[1; 12]);
        let s = draw_sample(&pop, &SampleDesignConfig::new(12, 3)).unwrap();
        assert_eq!(s.n_households(), 12);
        assert!(s.persons.iter().all(|p| p.weight == 1.0));
    }

    #[test]
    fn pi_formula() {
        let mut sizes = vec![1usize; 996];
        sizes.push(4);
        let pop = pop_with_sizes(&sizes);
        assert_eq!(pop.size(), 1000);
        let cfg = SampleDesignConfig::new(100, 0);
        let pi = inclusion_probabilities(&pop, &cfg).unwrap();
        assert!((pi[0] - 0.1).abs() < 1e-15);
        assert!((pi[999] - 0.4).abs() < 1e-15);
        let pi2 = inclusion_probabilities(&pop, &SampleDesignConfig::new(200, 0)).unwrap();
        for (a, b) in pi.iter().zip(&pi2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn certainty_inclusion_is_rejected() {
        let pop = pop_with_sizes(&[1, 1, 1, 1, 4]);
        let err = draw_sample(&pop, &SampleDesignConfig::new(2, 0)).unwrap_err();
        match err {
            Error::CertaintyInclusion(ids) => assert_eq!(ids, vec![5]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn exactly_n_prime_distinct_households() {
        let sizes: Vec<usize> = (0..500).map(|l| 1 + l % 5).collect();
        let pop = pop_with_sizes(&sizes);
        for seed in 0..20 {
            let s = draw_sample(&pop, &SampleDesignConfig::new(60, seed)).unwrap();
            assert_eq!(s.n_households(), 60);
            for p in &s.persons {
                let hh = &s.households[p.household];
                assert_eq!(p.weight, hh.weight);
                assert!(p.weight > 1.0);
            }
            let members: usize = s.households.iter().map(|h| h.size).sum();
            assert_eq!(members, s.persons.len());
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let sizes: Vec<usize> = (0..200).map(|l| 1 + l % 3).collect();
        let pop = pop_with_sizes(&sizes);
        let cfg = SampleDesignConfig::new(20, 77);
        assert_eq!(draw_sample(&pop, &cfg).unwrap(), draw_sample(&pop, &cfg).unwrap());
    }

    #[test]
    fn exhaustive_srswor_matches_combinatorics() {
        for n_pop in 2..=8 {
            for n in 1..=4.min(n_pop) {
                let p = PairwiseProbabilityProvider::srswor_exhaustive(n_pop, n).unwrap();
                assert_eq!(p.mode(), PairwiseMode::ExhaustiveTinyDesign);
                let first = n as f64 / n_pop as f64;
                let joint = (n * (n - 1)) as f64 / (n_pop * (n_pop - 1)) as f64;
                for k in 0..n_pop {
                    assert_eq!(p.first(k), first);
                    for l in 0..n_pop {
                        if k != l {
                            assert_eq!(p.joint(k, l), joint, "N={n_pop} n={n}");
                        }
                    }
                }
            }
        }
        assert!(PairwiseProbabilityProvider::srswor_exhaustive(9, 2).is_err());
    }

    #[test]
    fn independent_provider() {
        let p = PairwiseProbabilityProvider::independent(vec![0.2, 0.5]);
        assert_eq!(p.joint(0, 1), 0.1);
        assert_eq!(p.joint(1, 1), 0.5);
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(6, 3).len(), 20);
        assert_eq!(combinations(4, 2).len(), 6);
    }
}
