//! Benchmark data-generating processes with a planted three-cluster
//! structure, and a seeded replication-study driver.
//!
//! All recipes share the layout: `N = 10` groups whose sizes are drawn
//! uniformly from `[70, 100]`, split into three latent clusters covering
//! groups 1–2, 3–7, and 8–10 (sizes 2/5/3). Covariates are independent
//! standard normals per observation.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::HierarchicalDataset;
use crate::em::{fit, CollapseCriterion, FitConfig};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::metrics;

/// Number of groups in every recipe.
pub const N_GROUPS: usize = 10;
/// Group-size range (inclusive).
pub const GROUP_SIZE_RANGE: (u64, u64) = (70, 100);
/// Latent cluster per group: sizes 2/5/3.
pub const CLUSTER_OF_GROUP: [usize; N_GROUPS] = [0, 0, 1, 1, 1, 1, 1, 2, 2, 2];

/// Which benchmark recipe to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpVariant {
    /// Poisson response, random intercepts `{2.5, 1, −1}`.
    PoissonIntercept,
    /// Bernoulli response, random intercepts `{5, 2, −10}`.
    BernoulliIntercept,
    /// Bernoulli response, fixed intercept 10, random slopes `{10, 5, 0}` on
    /// a drawn covariate.
    BernoulliSlope,
    /// Bernoulli response, random intercepts `{5, 2, −10}` and random slopes
    /// `{10, 5, 0}` jointly.
    BernoulliInterceptSlope,
}

/// A fully specified recipe: variant plus the choice between one fixed slope
/// (coefficient 0.3 or −6) and two (adding 0.9 or 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgpSpec {
    pub variant: DgpVariant,
    pub two_fixed_slopes: bool,
}

impl DgpSpec {
    pub fn new(variant: DgpVariant, two_fixed_slopes: bool) -> Self {
        Self {
            variant,
            two_fixed_slopes,
        }
    }

    pub fn family(&self) -> Family {
        match self.variant {
            DgpVariant::PoissonIntercept => Family::Poisson,
            _ => Family::Bernoulli,
        }
    }

    /// Fixed coefficients in design order. The slope-only Bernoulli recipe
    /// carries a fixed intercept (coefficient 10 on a constant column) ahead
    /// of the slopes.
    pub fn true_beta(&self) -> Vec<f64> {
        let mut beta = Vec::new();
        if self.variant == DgpVariant::BernoulliSlope {
            beta.push(10.0);
        }
        match self.variant {
            DgpVariant::PoissonIntercept => {
                beta.push(0.3);
                if self.two_fixed_slopes {
                    beta.push(0.9);
                }
            }
            _ => {
                beta.push(-6.0);
                if self.two_fixed_slopes {
                    beta.push(3.0);
                }
            }
        }
        beta
    }

    /// Cluster coefficient vectors in cluster order (sizes 2/5/3).
    pub fn true_support(&self) -> Vec<Vec<f64>> {
        match self.variant {
            DgpVariant::PoissonIntercept => vec![vec![2.5], vec![1.0], vec![-1.0]],
            DgpVariant::BernoulliIntercept => vec![vec![5.0], vec![2.0], vec![-10.0]],
            DgpVariant::BernoulliSlope => vec![vec![10.0], vec![5.0], vec![0.0]],
            DgpVariant::BernoulliInterceptSlope => {
                vec![vec![5.0, 10.0], vec![2.0, 5.0], vec![-10.0, 0.0]]
            }
        }
    }

    pub fn n_fixed(&self) -> usize {
        self.true_beta().len()
    }

    pub fn n_random(&self) -> usize {
        match self.variant {
            DgpVariant::BernoulliInterceptSlope => 2,
            _ => 1,
        }
    }

    /// Whether the recipe draws an extra covariate for the random design.
    fn draws_random_covariate(&self) -> bool {
        matches!(
            self.variant,
            DgpVariant::BernoulliSlope | DgpVariant::BernoulliInterceptSlope
        )
    }
}

/// RNG for the data draw of one replicate: one stream per `(seed, replicate)`
/// pair, so replicates are independent and scheduling-order-free.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(2 * replicate);
    rng
}

/// Deterministic per-replicate seed for the model fit (starting-value draw),
/// taken from the companion stream of [`replicate_rng`].
pub fn replicate_fit_seed(master_seed: u64, replicate: u64) -> u64 {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(2 * replicate + 1);
    rng.next_u64()
}

/// Draw one response at linear predictor `eta`.
pub fn draw_response(family: Family, eta: f64, rng: &mut impl Rng) -> Result<u64> {
    match family {
        Family::Poisson => {
            let lambda = eta.exp();
            let dist = Poisson::new(lambda).map_err(|e| {
                Error::Numerical(format!("Poisson mean {lambda} is not sampleable: {e}"))
            })?;
            Ok(dist.sample(rng) as u64)
        }
        Family::Bernoulli => {
            let mu = family.inverse_link(eta);
            let u: f64 = rng.gen();
            Ok(u64::from(u <= mu))
        }
    }
}

/// Draw one dataset from the recipe.
///
/// Draw order is fixed so equal `(seed, replicate)` pairs give bitwise-equal
/// datasets: first the ten group sizes, then per observation the fixed
/// covariates (one or two), the random covariate when the recipe uses one,
/// and finally the response.
pub fn simulate_dataset(
    spec: &DgpSpec,
    master_seed: u64,
    replicate: u64,
) -> Result<HierarchicalDataset> {
    let mut rng = replicate_rng(master_seed, replicate);
    let family = spec.family();
    let beta = spec.true_beta();
    let support = spec.true_support();
    let p = spec.n_fixed();
    let q = spec.n_random();

    let sizes: Vec<u64> = (0..N_GROUPS)
        .map(|_| rng.gen_range(GROUP_SIZE_RANGE.0..=GROUP_SIZE_RANGE.1))
        .collect();
    let total: usize = sizes.iter().map(|&s| s as usize).sum();

    let mut groups = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    let mut x = Vec::with_capacity(total * p);
    let mut z = Vec::with_capacity(total * q);
    for (i, &size) in sizes.iter().enumerate() {
        let label = (i + 1).to_string();
        let c = &support[CLUSTER_OF_GROUP[i]];
        for _ in 0..size {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = if spec.two_fixed_slopes {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            let z1: f64 = if spec.draws_random_covariate() {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };

            let mut x_row = Vec::with_capacity(p);
            if spec.variant == DgpVariant::BernoulliSlope {
                x_row.push(1.0);
            }
            x_row.push(x1);
            if spec.two_fixed_slopes {
                x_row.push(x2);
            }
            let z_row = match spec.variant {
                DgpVariant::BernoulliSlope => vec![z1],
                DgpVariant::BernoulliInterceptSlope => vec![1.0, z1],
                _ => vec![1.0],
            };

            let eta = beta.iter().zip(&x_row).map(|(b, v)| b * v).sum::<f64>()
                + c.iter().zip(&z_row).map(|(ch, v)| ch * v).sum::<f64>();
            y.push(draw_response(family, eta, &mut rng)?);
            groups.push(label.clone());
            x.extend_from_slice(&x_row);
            z.extend_from_slice(&z_row);
        }
    }
    HierarchicalDataset::from_long(&groups, &y, &x, &z, p, q)
}

/// Mean and sample standard deviation (n−1; NaN below two values).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len();
    if n == 0 {
        return MeanSd {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        f64::NAN
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanSd { mean, sd }
}

/// One replicate's outcome. `error` is set when the fit failed; the remaining
/// fields are then absent.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub fit_seed: u64,
    pub error: Option<String>,
    pub m_hat: Option<usize>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    /// Support points sorted by ascending first coordinate.
    pub support_points: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub mean_entropy: Option<f64>,
    pub loglik: Option<f64>,
    pub mse: Option<f64>,
    pub mse_log: Option<f64>,
    pub chi_square: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub min_inner_loglik_delta: Option<f64>,
    pub max_weight_sum_error: Option<f64>,
    pub max_posterior_row_error: Option<f64>,
    /// Whether every pair merge stayed coordinate-wise between its parents.
    pub merges_within_segment: Option<bool>,
    pub n_merges: Option<usize>,
}

/// Summaries for the replicates that landed in one `M̂` bin.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MhatAggregate {
    /// `"2"`, `"3"`, `"4"`, or `"other"` (M̂ = 1 or ≥ 5).
    pub m_label: String,
    pub n: usize,
    /// Share of all runs (failures count in the denominator).
    pub proportion: f64,
    pub entropy: MeanSd,
    /// Positional mean/sd of the sorted support points; absent for the
    /// mixed-size "other" bin and for empty bins.
    pub support_mean: Option<Vec<Vec<f64>>>,
    pub support_sd: Option<Vec<Vec<f64>>>,
    pub weights_mean: Option<Vec<f64>>,
    pub weights_sd: Option<Vec<f64>>,
    pub beta_mean: Option<Vec<f64>>,
    pub beta_sd: Option<Vec<f64>>,
}

/// Study-level goodness-of-fit averages over the successful replicates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GofAggregate {
    pub mse: Option<MeanSd>,
    pub mse_log: Option<MeanSd>,
    pub chi_square: Option<MeanSd>,
    pub sensitivity: Option<MeanSd>,
    pub specificity: Option<MeanSd>,
    pub accuracy: Option<MeanSd>,
}

/// Full report of one replication study under one collapse criterion.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StudyReport {
    /// Human-readable criterion label, e.g. `alpha=0.05` or `t=0.5`.
    pub criterion: String,
    pub n_runs: usize,
    pub n_failed: usize,
    /// Share of runs per `M̂` bin; complements to one with the failure rate.
    pub proportions: BTreeMap<String, f64>,
    pub aggregates: Vec<MhatAggregate>,
    pub gof: GofAggregate,
    pub records: Vec<ReplicateRecord>,
}

fn criterion_label(criterion: &CollapseCriterion) -> String {
    match criterion {
        CollapseCriterion::ConfidenceLevel(alpha) => format!("alpha={alpha}"),
        CollapseCriterion::DistanceThreshold(t) => format!("t={t}"),
    }
}

fn m_label(m: usize) -> &'static str {
    match m {
        2 => "2",
        3 => "3",
        4 => "4",
        _ => "other",
    }
}

/// Run `n_runs` seeded replicates per criterion: fresh data draw, fit, and
/// per-replicate records with goodness-of-fit, aggregated per `M̂` bin.
/// Replicate fit failures are recorded in the report, not fatal; data-draw
/// failures abort (they indicate a broken recipe).
pub fn run_study(
    spec: &DgpSpec,
    base: &FitConfig,
    criteria: &[CollapseCriterion],
    n_runs: usize,
    master_seed: u64,
) -> Result<Vec<StudyReport>> {
    if n_runs == 0 {
        return Err(Error::Invalid("a study needs at least one run".into()));
    }
    if criteria.is_empty() {
        return Err(Error::Invalid("a study needs at least one criterion".into()));
    }
    let family = spec.family();
    let mut reports = Vec::with_capacity(criteria.len());
    for criterion in criteria {
        let mut records = Vec::with_capacity(n_runs);
        for replicate in 0..n_runs {
            let data = simulate_dataset(spec, master_seed, replicate as u64)?;
            let fit_seed = replicate_fit_seed(master_seed, replicate as u64);
            let mut config = base.clone();
            config.family = family;
            config.criterion = *criterion;
            config.seed = fit_seed;
            config.compute_inference = false;
            records.push(run_replicate(&data, &config, replicate, fit_seed));
        }
        reports.push(summarize(criterion, &records, n_runs));
    }
    Ok(reports)
}

fn run_replicate(
    data: &HierarchicalDataset,
    config: &FitConfig,
    replicate: usize,
    fit_seed: u64,
) -> ReplicateRecord {
    let failed = |error: String| ReplicateRecord {
        replicate,
        fit_seed,
        error: Some(error),
        m_hat: None,
        converged: None,
        iterations: None,
        support_points: None,
        weights: None,
        beta: None,
        mean_entropy: None,
        loglik: None,
        mse: None,
        mse_log: None,
        chi_square: None,
        sensitivity: None,
        specificity: None,
        accuracy: None,
        min_inner_loglik_delta: None,
        max_weight_sum_error: None,
        max_posterior_row_error: None,
        merges_within_segment: None,
        n_merges: None,
    };
    let result = match fit(data, config) {
        Ok(result) => result,
        Err(err) => return failed(err.to_string()),
    };
    let mu = match result.fitted_means(data, config.family) {
        Ok(mu) => mu,
        Err(err) => return failed(format!("fitted means unavailable: {err}")),
    };
    let (mut mse, mut mse_log, mut chi_square) = (None, None, None);
    let (mut sensitivity, mut specificity, mut accuracy) = (None, None, None);
    match config.family {
        Family::Poisson => {
            if let Ok(gof) = metrics::count_metrics(data.responses(), &metrics::rounded_counts(&mu))
            {
                mse = Some(gof.mse);
                mse_log = Some(gof.mse_log);
                chi_square = Some(gof.chi_square);
            }
        }
        Family::Bernoulli => {
            if let Ok(gof) = metrics::binary_metrics(data.responses(), &mu, 0.5) {
                sensitivity = Some(gof.sensitivity);
                specificity = Some(gof.specificity);
                accuracy = Some(gof.accuracy);
            }
        }
    }
    ReplicateRecord {
        replicate,
        fit_seed,
        error: None,
        m_hat: Some(result.support.n_points()),
        converged: Some(result.converged()),
        iterations: Some(result.iterations),
        support_points: Some(result.support.points().to_vec()),
        weights: Some(result.support.weights().to_vec()),
        beta: Some(result.beta.clone()),
        mean_entropy: Some(result.mean_entropy),
        loglik: result.loglik_trace.last().map(|p| p.loglik),
        mse,
        mse_log,
        chi_square,
        sensitivity,
        specificity,
        accuracy,
        min_inner_loglik_delta: Some(result.diagnostics.min_inner_loglik_delta),
        max_weight_sum_error: Some(result.diagnostics.max_weight_sum_error),
        max_posterior_row_error: Some(result.diagnostics.max_posterior_row_error),
        merges_within_segment: Some(result.diagnostics.merges_within_segment),
        n_merges: Some(result.diagnostics.n_merges),
    }
}

fn summarize(
    criterion: &CollapseCriterion,
    records: &[ReplicateRecord],
    n_runs: usize,
) -> StudyReport {
    let fitted: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n_failed = records.len() - fitted.len();

    let mut proportions = BTreeMap::new();
    for label in ["2", "3", "4", "other"] {
        proportions.insert(label.to_string(), 0.0);
    }
    for record in &fitted {
        let label = m_label(record.m_hat.expect("fitted record has M̂"));
        *proportions.get_mut(label).expect("bin exists") += 1.0 / n_runs as f64;
    }

    let aggregates = ["2", "3", "4", "other"]
        .into_iter()
        .map(|label| {
            let bin: Vec<&&ReplicateRecord> = fitted
                .iter()
                .filter(|r| m_label(r.m_hat.expect("fitted record has M̂")) == label)
                .collect();
            let n = bin.len();
            let entropies: Vec<f64> =
                bin.iter().filter_map(|r| r.mean_entropy).collect();
            // Positional summaries only when every member has the same shape.
            let same_m = label != "other" && n > 0;
            let (support_mean, support_sd) = if same_m {
                let m = bin[0].m_hat.expect("fitted record has M̂");
                let q = bin[0].support_points.as_ref().expect("points")[0].len();
                let mut means = vec![vec![0.0; q]; m];
                let mut sds = vec![vec![0.0; q]; m];
                for (k, row) in means.iter_mut().enumerate() {
                    for (d, cell) in row.iter_mut().enumerate() {
                        let pool: Vec<f64> = bin
                            .iter()
                            .map(|r| r.support_points.as_ref().expect("points")[k][d])
                            .collect();
                        let stats = mean_sd(&pool);
                        *cell = stats.mean;
                        sds[k][d] = stats.sd;
                    }
                }
                (Some(means), Some(sds))
            } else {
                (None, None)
            };
            let (weights_mean, weights_sd) = if same_m {
                let m = bin[0].m_hat.expect("fitted record has M̂");
                let mut means = vec![0.0; m];
                let mut sds = vec![0.0; m];
                for k in 0..m {
                    let pool: Vec<f64> = bin
                        .iter()
                        .map(|r| r.weights.as_ref().expect("weights")[k])
                        .collect();
                    let stats = mean_sd(&pool);
                    means[k] = stats.mean;
                    sds[k] = stats.sd;
                }
                (Some(means), Some(sds))
            } else {
                (None, None)
            };
            let (beta_mean, beta_sd) = if n > 0 {
                let p = bin[0].beta.as_ref().expect("beta").len();
                let mut means = vec![0.0; p];
                let mut sds = vec![0.0; p];
                for d in 0..p {
                    let pool: Vec<f64> = bin
                        .iter()
                        .map(|r| r.beta.as_ref().expect("beta")[d])
                        .collect();
                    let stats = mean_sd(&pool);
                    means[d] = stats.mean;
                    sds[d] = stats.sd;
                }
                (Some(means), Some(sds))
            } else {
                (None, None)
            };
            MhatAggregate {
                m_label: label.to_string(),
                n,
                proportion: n as f64 / n_runs as f64,
                entropy: mean_sd(&entropies),
                support_mean,
                support_sd,
                weights_mean,
                weights_sd,
                beta_mean,
                beta_sd,
            }
        })
        .collect();

    let gof_field = |extract: fn(&ReplicateRecord) -> Option<f64>| -> Option<MeanSd> {
        let pool: Vec<f64> = fitted.iter().filter_map(|r| extract(r)).collect();
        if pool.is_empty() {
            None
        } else {
            Some(mean_sd(&pool))
        }
    };
    let gof = GofAggregate {
        mse: gof_field(|r| r.mse),
        mse_log: gof_field(|r| r.mse_log),
        chi_square: gof_field(|r| r.chi_square),
        sensitivity: gof_field(|r| r.sensitivity),
        specificity: gof_field(|r| r.specificity),
        accuracy: gof_field(|r| r.accuracy),
    };

    StudyReport {
        criterion: criterion_label(criterion),
        n_runs,
        n_failed,
        proportions,
        aggregates,
        gof,
        records: records.to_vec(),
    }
}
