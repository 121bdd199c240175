//! `spglmm` — fit semi-parametric mixed-effects models with discrete random
//! effects, run seeded replication studies, and scan the merge threshold.
//!
//! Exit codes: 0 success (for `fit`: converged), 2 fit finished without
//! converging (results are still written), 1 input or runtime error.

mod config;
mod ingest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spglmm::em::{fit, CollapseCriterion, FitConfig};
use spglmm::metrics::elbow_scan;
use spglmm::simulate::{replicate_fit_seed, run_study, simulate_dataset, DgpSpec, DgpVariant};
use spglmm::Family;

use config::ConfigMap;
use ingest::{ingest_csv, CsvSchema};

#[derive(Parser)]
#[command(
    name = "spglmm",
    version,
    about = "Semi-parametric mixed-effects models with discrete random effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV file
    Fit(FitArgs),
    /// Draw a benchmark recipe many times and fit every draw
    Simulate(SimulateArgs),
    /// Fit once per distance threshold and tabulate entropy and cluster count
    Scan(ScanArgs),
}

/// Iteration caps, tolerances, and the RNG seed, shared by all subcommands.
#[derive(Args)]
struct KnobArgs {
    /// Outer iteration cap
    #[arg(long = "K", value_name = "INT")]
    max_outer: Option<usize>,
    /// Iteration from which clusters claimed by no group are pruned
    #[arg(long = "K1", value_name = "INT")]
    prune_from: Option<usize>,
    /// Iteration after which confidence-region merging starts
    #[arg(long = "K2", value_name = "INT")]
    collapse_from: Option<usize>,
    /// Inner alternating-maximization cap per outer iteration
    #[arg(long, value_name = "INT")]
    itmax: Option<usize>,
    /// Convergence tolerance on support-point movement
    #[arg(long = "tR", value_name = "FLOAT")]
    tol_support: Option<f64>,
    /// Convergence tolerance on fixed-coefficient movement
    #[arg(long = "tF", value_name = "FLOAT")]
    tol_fixed: Option<f64>,
    /// RNG seed (fit: starting values; simulate/scan: master seed)
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

/// Fully resolved knob values (flags, then config file, then defaults).
struct Knobs {
    max_outer: usize,
    prune_from: usize,
    collapse_from: usize,
    max_inner: usize,
    tol_support: f64,
    tol_fixed: f64,
    seed: u64,
}

impl Knobs {
    fn resolve(args: &KnobArgs, cfg: &ConfigMap) -> Result<Self> {
        Ok(Self {
            max_outer: args.max_outer.or(cfg.parse("K")?).unwrap_or(60),
            prune_from: args.prune_from.or(cfg.parse("K1")?).unwrap_or(20),
            collapse_from: args.collapse_from.or(cfg.parse("K2")?).unwrap_or(5),
            max_inner: args.itmax.or(cfg.parse("itmax")?).unwrap_or(20),
            tol_support: args.tol_support.or(cfg.parse("tR")?).unwrap_or(1e-5),
            tol_fixed: args.tol_fixed.or(cfg.parse("tF")?).unwrap_or(1e-5),
            seed: args.seed.or(cfg.parse("seed")?).unwrap_or(0),
        })
    }

    fn apply(&self, config: &mut FitConfig) {
        config.max_outer = self.max_outer;
        config.prune_from = self.prune_from;
        config.collapse_from = self.collapse_from;
        config.max_inner = self.max_inner;
        config.tol_support = self.tol_support;
        config.tol_fixed = self.tol_fixed;
        config.seed = self.seed;
    }
}

#[derive(Args)]
struct FitArgs {
    /// Flat key=value configuration file; flags win on conflict
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Input CSV, one row per observation, header required
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Group identifier column
    #[arg(long, value_name = "COL")]
    group: Option<String>,
    /// Response column (nonnegative integer counts, or 0/1 for bernoulli)
    #[arg(long, value_name = "COL")]
    response: Option<String>,
    /// Fixed-effect columns, comma-separated; the name 1 adds a constant term
    #[arg(long, value_name = "COLS", value_delimiter = ',')]
    fixed: Option<Vec<String>>,
    /// Random-effect columns, comma-separated; the name 1 adds a constant term
    #[arg(long, value_name = "COLS", value_delimiter = ',')]
    random: Option<Vec<String>>,
    /// Columns standardized to mean 0, sd 1, comma-separated
    #[arg(long, value_name = "COLS", value_delimiter = ',')]
    standardize: Option<Vec<String>>,
    /// Response family: poisson or bernoulli
    #[arg(long, value_name = "NAME")]
    family: Option<String>,
    /// Confidence level for the overlap merge criterion
    #[arg(long, value_name = "FLOAT", conflicts_with = "t")]
    alpha: Option<f64>,
    /// Distance threshold for the merge criterion
    #[arg(long, value_name = "FLOAT")]
    t: Option<f64>,
    /// Output JSON path; a companion .assignments.csv is written next to it
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: KnobArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Flat key=value configuration file; flags win on conflict
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Recipe: poisson-intercept, bernoulli-intercept, bernoulli-slope,
    /// or bernoulli-intercept-slope
    #[arg(long, value_name = "NAME")]
    variant: Option<String>,
    /// Add the recipe's second fixed slope
    #[arg(long)]
    two_slopes: bool,
    /// Number of replicates
    #[arg(long = "n-runs", value_name = "INT")]
    n_runs: Option<usize>,
    /// Confidence level(s); repeat or comma-separate for a grid
    #[arg(long, value_name = "FLOATS", value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Distance threshold(s); repeat or comma-separate for a grid
    #[arg(long, value_name = "FLOATS", value_delimiter = ',')]
    t: Vec<f64>,
    /// Output JSON path; a companion .replicates.csv is written next to it
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: KnobArgs,
}

#[derive(Args)]
struct ScanArgs {
    /// Flat key=value configuration file; flags win on conflict
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Input CSV (exclusive with --variant)
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Group identifier column (CSV source)
    #[arg(long, value_name = "COL")]
    group: Option<String>,
    /// Response column (CSV source)
    #[arg(long, value_name = "COL")]
    response: Option<String>,
    /// Fixed-effect columns (CSV source)
    #[arg(long, value_name = "COLS", value_delimiter = ',')]
    fixed: Option<Vec<String>>,
    /// Random-effect columns (CSV source)
    #[arg(long, value_name = "COLS", value_delimiter = ',')]
    random: Option<Vec<String>>,
    /// Columns standardized to mean 0, sd 1 (CSV source)
    #[arg(long, value_name = "COLS", value_delimiter = ',')]
    standardize: Option<Vec<String>>,
    /// Response family, required with --data
    #[arg(long, value_name = "NAME")]
    family: Option<String>,
    /// Recipe to draw one dataset from (exclusive with --data)
    #[arg(long, value_name = "NAME", conflicts_with = "data")]
    variant: Option<String>,
    /// Add the recipe's second fixed slope
    #[arg(long)]
    two_slopes: bool,
    /// Replicate index of the recipe draw
    #[arg(long, value_name = "INT")]
    replicate: Option<u64>,
    /// Threshold grid; repeat or comma-separate
    #[arg(long, value_name = "FLOATS", value_delimiter = ',')]
    t: Vec<f64>,
    /// Output CSV path
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: KnobArgs,
}

const KNOB_KEYS: [&str; 7] = ["K", "K1", "K2", "itmax", "tR", "tF", "seed"];

fn allowed_keys(extra: &[&'static str]) -> Vec<&'static str> {
    let mut keys = KNOB_KEYS.to_vec();
    keys.extend_from_slice(extra);
    keys
}

fn parse_family(name: &str) -> Result<Family> {
    match name.to_ascii_lowercase().as_str() {
        "poisson" => Ok(Family::Poisson),
        "bernoulli" => Ok(Family::Bernoulli),
        other => bail!("unknown family {other:?}; expected poisson or bernoulli"),
    }
}

fn family_name(family: Family) -> &'static str {
    match family {
        Family::Poisson => "poisson",
        Family::Bernoulli => "bernoulli",
    }
}

fn parse_variant(name: &str) -> Result<DgpVariant> {
    match name.to_ascii_lowercase().as_str() {
        "poisson-intercept" => Ok(DgpVariant::PoissonIntercept),
        "bernoulli-intercept" => Ok(DgpVariant::BernoulliIntercept),
        "bernoulli-slope" => Ok(DgpVariant::BernoulliSlope),
        "bernoulli-intercept-slope" => Ok(DgpVariant::BernoulliInterceptSlope),
        other => bail!(
            "unknown recipe {other:?}; expected poisson-intercept, bernoulli-intercept, \
             bernoulli-slope, or bernoulli-intercept-slope"
        ),
    }
}

fn criterion_echo(criterion: &CollapseCriterion) -> output::CriterionEcho {
    match *criterion {
        CollapseCriterion::ConfidenceLevel(value) => output::CriterionEcho {
            r#type: "alpha".to_string(),
            value,
        },
        CollapseCriterion::DistanceThreshold(value) => output::CriterionEcho {
            r#type: "t".to_string(),
            value,
        },
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigMap> {
    match path {
        Some(p) => ConfigMap::load(p),
        None => Ok(ConfigMap::empty()),
    }
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    cfg.warn_unknown(&allowed_keys(&[
        "data",
        "group",
        "response",
        "fixed",
        "random",
        "standardize",
        "family",
        "alpha",
        "t",
        "out",
    ]));

    let data_path = args
        .data
        .or_else(|| cfg.path("data"))
        .context("missing input CSV: give --data")?;
    let schema = CsvSchema {
        group: args
            .group
            .or_else(|| cfg.string("group"))
            .context("missing group column: give --group")?,
        response: args
            .response
            .or_else(|| cfg.string("response"))
            .context("missing response column: give --response")?,
        fixed: args
            .fixed
            .or_else(|| cfg.list("fixed"))
            .unwrap_or_default(),
        random: args
            .random
            .or_else(|| cfg.list("random"))
            .context("missing random-effect columns: give --random")?,
        standardize: args
            .standardize
            .or_else(|| cfg.list("standardize"))
            .unwrap_or_default(),
    };
    let family = parse_family(
        &args
            .family
            .or_else(|| cfg.string("family"))
            .context("missing response family: give --family poisson|bernoulli")?,
    )?;
    let criterion = match (args.alpha.or(cfg.parse("alpha")?), args.t.or(cfg.parse("t")?)) {
        (Some(alpha), None) => CollapseCriterion::ConfidenceLevel(alpha),
        (None, Some(t)) => CollapseCriterion::DistanceThreshold(t),
        (None, None) => bail!("give exactly one of --alpha or --t"),
        (Some(_), Some(_)) => bail!("--alpha and --t are mutually exclusive"),
    };
    let knobs = Knobs::resolve(&args.knobs, &cfg)?;
    let out = args
        .out
        .or_else(|| cfg.path("out"))
        .context("missing output path: give --out")?;

    let ingested = ingest_csv(&data_path, &schema)?;
    if ingested.n_dropped > 0 {
        eprintln!(
            "dropped {} of {} rows with missing values",
            ingested.n_dropped, ingested.n_rows_read
        );
    }

    let mut config = FitConfig::new(family, criterion);
    knobs.apply(&mut config);
    let result = fit(&ingested.data, &config)?;

    let echo = output::ConfigEcho {
        family: family_name(family).to_string(),
        criterion: criterion_echo(&criterion),
        max_outer: config.max_outer,
        prune_from: config.prune_from,
        collapse_from: config.collapse_from,
        itmax: config.max_inner,
        tol_support: config.tol_support,
        tol_fixed: config.tol_fixed,
        seed: config.seed,
        data: data_path.display().to_string(),
        group: schema.group.clone(),
        response: schema.response.clone(),
        fixed: schema.fixed.clone(),
        random: schema.random.clone(),
        standardize: schema.standardize.clone(),
        n_groups: ingested.data.n_groups(),
        n_obs: ingested.data.n_obs(),
        n_dropped: ingested.n_dropped,
    };
    let report = output::build_fit_report(echo, &schema.fixed, &result);
    output::write_json(&out, &report)?;
    let assignments_path = output::companion_path(&out, "assignments.csv");
    output::write_assignments_csv(&assignments_path, &ingested.data, &result)?;

    println!(
        "{} clusters over {} groups in {} iterations ({}); results in {} and {}",
        result.support.n_points(),
        ingested.data.n_groups(),
        result.iterations,
        if result.converged() { "converged" } else { "not converged" },
        out.display(),
        assignments_path.display()
    );
    Ok(if result.converged() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    cfg.warn_unknown(&allowed_keys(&[
        "variant",
        "two-slopes",
        "n-runs",
        "alpha",
        "t",
        "out",
    ]));

    let variant = parse_variant(
        &args
            .variant
            .or_else(|| cfg.string("variant"))
            .context("missing recipe: give --variant")?,
    )?;
    let two_fixed_slopes = args.two_slopes || cfg.parse("two-slopes")?.unwrap_or(false);
    let spec = DgpSpec {
        variant,
        two_fixed_slopes,
    };
    let n_runs = args
        .n_runs
        .or(cfg.parse("n-runs")?)
        .context("missing replicate count: give --n-runs")?;
    let alphas = if args.alpha.is_empty() {
        cfg.f64_list("alpha")?.unwrap_or_default()
    } else {
        args.alpha
    };
    let ts = if args.t.is_empty() {
        cfg.f64_list("t")?.unwrap_or_default()
    } else {
        args.t
    };
    let criteria: Vec<CollapseCriterion> = alphas
        .into_iter()
        .map(CollapseCriterion::ConfidenceLevel)
        .chain(ts.into_iter().map(CollapseCriterion::DistanceThreshold))
        .collect();
    if criteria.is_empty() {
        bail!("give at least one --alpha or --t");
    }
    let knobs = Knobs::resolve(&args.knobs, &cfg)?;
    let out = args
        .out
        .or_else(|| cfg.path("out"))
        .context("missing output path: give --out")?;

    let mut base = FitConfig::new(spec.family(), criteria[0]);
    knobs.apply(&mut base);
    let reports = run_study(&spec, &base, &criteria, n_runs, knobs.seed)?;

    output::write_json(&out, &reports)?;
    let replicates_path = output::companion_path(&out, "replicates.csv");
    output::write_replicates_csv(&replicates_path, &reports)?;

    for report in &reports {
        let p3 = report.proportions.get("3").copied().unwrap_or(0.0);
        println!(
            "{}: P(3 clusters) = {p3:.3} over {} runs ({} failed)",
            report.criterion, report.n_runs, report.n_failed
        );
    }
    println!(
        "results in {} and {}",
        out.display(),
        replicates_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_scan(args: ScanArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    cfg.warn_unknown(&allowed_keys(&[
        "data",
        "group",
        "response",
        "fixed",
        "random",
        "standardize",
        "family",
        "variant",
        "two-slopes",
        "replicate",
        "t",
        "out",
    ]));

    let t_grid = if args.t.is_empty() {
        cfg.f64_list("t")?.unwrap_or_default()
    } else {
        args.t
    };
    if t_grid.is_empty() {
        bail!("give at least one --t threshold");
    }
    let knobs = Knobs::resolve(&args.knobs, &cfg)?;
    let out = args
        .out
        .or_else(|| cfg.path("out"))
        .context("missing output path: give --out")?;

    let data_path = args.data.or_else(|| cfg.path("data"));
    let variant_name = args.variant.or_else(|| cfg.string("variant"));
    let (data, family, fit_seed) = match (data_path, variant_name) {
        (Some(path), None) => {
            let schema = CsvSchema {
                group: args
                    .group
                    .or_else(|| cfg.string("group"))
                    .context("missing group column: give --group")?,
                response: args
                    .response
                    .or_else(|| cfg.string("response"))
                    .context("missing response column: give --response")?,
                fixed: args
                    .fixed
                    .or_else(|| cfg.list("fixed"))
                    .unwrap_or_default(),
                random: args
                    .random
                    .or_else(|| cfg.list("random"))
                    .context("missing random-effect columns: give --random")?,
                standardize: args
                    .standardize
                    .or_else(|| cfg.list("standardize"))
                    .unwrap_or_default(),
            };
            let family = parse_family(
                &args
                    .family
                    .or_else(|| cfg.string("family"))
                    .context("missing response family: give --family with --data")?,
            )?;
            let ingested = ingest_csv(&path, &schema)?;
            if ingested.n_dropped > 0 {
                eprintln!(
                    "dropped {} of {} rows with missing values",
                    ingested.n_dropped, ingested.n_rows_read
                );
            }
            (ingested.data, family, knobs.seed)
        }
        (None, Some(name)) => {
            let variant = parse_variant(&name)?;
            let spec = DgpSpec {
                variant,
                two_fixed_slopes: args.two_slopes || cfg.parse("two-slopes")?.unwrap_or(false),
            };
            let replicate = args.replicate.or(cfg.parse("replicate")?).unwrap_or(0);
            let data = simulate_dataset(&spec, knobs.seed, replicate)?;
            (
                data,
                spec.family(),
                replicate_fit_seed(knobs.seed, replicate),
            )
        }
        (Some(_), Some(_)) => bail!("--data and --variant are mutually exclusive"),
        (None, None) => bail!("give a data source: --data CSV or --variant recipe"),
    };

    let mut base = FitConfig::new(family, CollapseCriterion::DistanceThreshold(t_grid[0]));
    knobs.apply(&mut base);
    base.seed = fit_seed;
    base.compute_inference = false;
    let points = elbow_scan(&data, &base, &t_grid)?;
    output::write_scan_csv(&out, &points)?;

    for p in &points {
        println!("t={:<6} entropy={:.6} clusters={}", p.t, p.mean_entropy, p.m_hat);
    }
    println!("results in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Scan(args) => cmd_scan(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match Cli::try_parse() {
        Ok(cli) => run(cli).unwrap_or_else(|err| {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }),
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            ExitCode::from(code)
        }
    }
}
