use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use sae_core::bootstrap::BootstrapConfig;
use sae_core::population::{
    generate_synthetic_population, load_population, write_population, write_truths, DomainFrame, GeneratorConfig,
    Population,
};
use sae_core::sampling::{draw_sample, Sample, SampleDesignConfig};
use sae_core::sim::{
    accuracy, archive_rows, estimate_sample, load_archive, load_classes, load_truths, render_report, run_simulation,
    size_classes_for, write_archive, write_classes, write_estimates, Estimator, PipelineOptions, ReportFormat,
    SimConfig,
};
use sae_core::StudyVariable;

const PERSONS_FILE: &str = "persons.csv";
const COVARIATES_FILE: &str = "covariates.csv";
const TRUTHS_FILE: &str = "truths.csv";
const CLASSES_FILE: &str = "classes.csv";

#[derive(Parser)]
#[command(name = "sae", version, about = "Small-area estimation of domain proportions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population (persons, covariates, truths).
    Generate(GenerateArgs),
    /// Draw one household PPS sample and export it.
    Sample(SampleArgs),
    /// Run every estimator on one sample.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo experiment and write archives and reports.
    Simulate(SimulateArgs),
    /// Render an accuracy report from an archived run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML generator configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "population")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Directory holding persons.csv and covariates.csv.
    #[arg(long)]
    population: PathBuf,
    #[arg(long, default_value_t = 400)]
    n_households: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "sample")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    population: PathBuf,
    /// Sample CSV written by `sample`.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "unemployed,employed")]
    variables: Vec<StudyVariable>,
    #[arg(long, value_delimiter = ',', default_value = "direct,s,fh,c,ssd")]
    estimators: Vec<Estimator>,
    #[arg(long, default_value_t = sae_core::bootstrap::DEFAULT_REPLICATES)]
    bootstrap_b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use raw direct variances instead of GVF-smoothed ones.
    #[arg(long)]
    no_smoothing: bool,
    #[arg(long, default_value = "estimates")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML simulation configuration; may embed a [generator] table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Existing population directory; otherwise one is generated.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    bootstrap_b: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<Estimator>>,
    /// Run replicates on one thread.
    #[arg(long)]
    serial: bool,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long, default_value = "md")]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a `simulate` run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "unemployed")]
    variable: StudyVariable,
    #[arg(long, default_value = "md")]
    format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Sample(a) => sample(a),
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dir(dir: &Path) -> Result<(Population, DomainFrame)> {
    load_population(&dir.join(PERSONS_FILE), &dir.join(COVARIATES_FILE))
        .with_context(|| format!("loading population from {}", dir.display()))
}

fn save_dir(dir: &Path, pop: &Population, frame: &DomainFrame) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_population(pop, frame, &dir.join(PERSONS_FILE), &dir.join(COVARIATES_FILE))?;
    write_truths(frame, &dir.join(TRUTHS_FILE))?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => GeneratorConfig::from_toml_str(&read_to_string(p)?)?,
        None => GeneratorConfig::default(),
    };
    let seed = a.seed.unwrap_or(cfg.seed);
    let (pop, frame) = generate_synthetic_population(&cfg, seed)?;
    save_dir(&a.out_dir, &pop, &frame)?;
    info!(
        "generated {} persons in {} households over {} domains into {}",
        pop.size(),
        pop.households().len(),
        frame.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let (pop, _) = load_dir(&a.population)?;
    let s = draw_sample(&pop, &SampleDesignConfig::new(a.n_households, a.seed))?;
    fs::create_dir_all(&a.out_dir)?;
    let path = a.out_dir.join("sample.csv");
    s.write_csv(&path)?;
    info!("{} households, {} persons written to {}", s.n_households(), s.persons.len(), path.display());
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let (_, frame) = load_dir(&a.population)?;
    let s = Sample::load_csv(&a.sample, frame.len())?;
    let mut estimators = a.estimators.clone();
    if estimators.contains(&Estimator::Opt) {
        warn!("opt needs the simulation-wide truth and is skipped for a single sample");
        estimators.retain(|e| *e != Estimator::Opt);
    }
    let opts = PipelineOptions {
        estimators,
        smoothing: !a.no_smoothing,
        bootstrap: BootstrapConfig::new(a.bootstrap_b, a.seed),
        ..PipelineOptions::default()
    };
    fs::create_dir_all(&a.out_dir)?;
    for var in &a.variables {
        let est = estimate_sample(&s, &frame, *var, &opts, None)?;
        for f in &est.failures {
            warn!("{var}: {f}");
        }
        if let Some(d) = est.delta_star {
            info!("{var}: adaptive SSD delta = {d:.4}");
        }
        let path = a.out_dir.join(format!("estimates_{var}.csv"));
        write_estimates(&path, &est.rows)?;
        info!("{var}: estimates written to {}", path.display());
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::from_toml_str(&read_to_string(p)?)?,
        None => SimConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.replicates {
        cfg.replicates = v;
    }
    if let Some(v) = a.bootstrap_b {
        cfg.bootstrap_b = v;
    }
    if let Some(v) = a.estimators {
        cfg.estimators = v;
    }
    if a.serial {
        cfg.parallel = false;
    }
    cfg.validate()?;

    fs::create_dir_all(&a.out_dir)?;
    let (pop, frame) = match &a.population {
        Some(dir) => load_dir(dir)?,
        None => {
            let g = cfg.generator.clone().unwrap_or_default();
            let (pop, frame) = generate_synthetic_population(&g, cfg.seed)?;
            save_dir(&a.out_dir.join("population"), &pop, &frame)?;
            (pop, frame)
        }
    };
    write_truths(&frame, &a.out_dir.join(TRUTHS_FILE))?;
    fs::write(a.out_dir.join("config.toml"), toml::to_string(&cfg)?)?;

    let start = Instant::now();
    let out = run_simulation(&pop, &frame, &cfg)?;
    info!("{} replicates in {:.1}s", cfg.replicates, start.elapsed().as_secs_f64());

    let mut classes = None;
    for (var, recs) in &out.records {
        let failed = recs.iter().filter(|r| !r.estimates.failures.is_empty()).count();
        if failed > 0 {
            warn!("{var}: {failed} replicates had module failures; affected cells are NA");
        }
        let rows = archive_rows(recs);
        write_archive(&a.out_dir.join(format!("records_{var}.csv")), &rows)?;
        let cls = classes.get_or_insert_with(|| size_classes_for(&pop, &cfg, &rows));
        let report = accuracy(&rows, &frame.truths(*var), cls);
        let ext = match a.format {
            ReportFormat::Csv => "csv",
            ReportFormat::Md => "md",
        };
        let text = render_report(&report, a.format);
        fs::write(a.out_dir.join(format!("report_{var}.{ext}")), &text)?;
        println!("{var}\n{text}");
    }
    if let Some(cls) = &classes {
        write_classes(&a.out_dir.join(CLASSES_FILE), cls)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let records = a.run.join(format!("records_{}.csv", a.variable));
    if !records.exists() {
        bail!("no archive for {} in {}", a.variable, a.run.display());
    }
    let rows = load_archive(&records)?;
    let truths = load_truths(&a.run.join(TRUTHS_FILE), a.variable)?;
    let classes = load_classes(&a.run.join(CLASSES_FILE))?;
    let text = render_report(&accuracy(&rows, &truths, &classes), a.format);
    match a.out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
