//! Result serialization: JSON with exact-round-trip floats, and CSV files
//! for assignments, study replicates, and threshold scans.

use std::io;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use spglmm::em::{FitResult, TracePoint};
use spglmm::metrics::ElbowPoint;
use spglmm::simulate::StudyReport;
use spglmm::HierarchicalDataset;

/// JSON formatter printing every float with 17 significant digits in
/// scientific notation, so reloading a file reproduces the exact `f64` bits.
/// Non-finite values never reach this hook: `serde_json` writes them as
/// `null`.
#[derive(Default)]
struct SciFloats;

impl serde_json::ser::Formatter for SciFloats {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize `value` to `path` with [`SciFloats`] and a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFloats);
    value
        .serialize(&mut ser)
        .with_context(|| format!("serializing {}", path.display()))?;
    buf.push(b'\n');
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Float as a CSV cell: 17 significant digits, `NaN`/`inf`/`-inf` spelled out.
pub fn fmt_f64(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else if value.is_nan() {
        "NaN".to_string()
    } else if value > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn fmt_opt_f64(value: Option<f64>) -> String {
    value.map(fmt_f64).unwrap_or_default()
}

fn fmt_opt<T: ToString>(value: &Option<T>) -> String {
    value.as_ref().map(T::to_string).unwrap_or_default()
}

/// Companion path for a secondary output: `results.json` →
/// `results.assignments.csv`.
pub fn companion_path(out: &Path, extension: &str) -> PathBuf {
    out.with_extension(extension)
}

// ---------------------------------------------------------------------------
// Fit result JSON schema
// ---------------------------------------------------------------------------

/// The merge criterion as it appears in the `config` block.
#[derive(Debug, Serialize)]
pub struct CriterionEcho {
    /// `"alpha"` or `"t"`.
    pub r#type: String,
    pub value: f64,
}

/// Echo of the fully resolved run configuration.
#[derive(Debug, Serialize)]
pub struct ConfigEcho {
    pub family: String,
    pub criterion: CriterionEcho,
    #[serde(rename = "K")]
    pub max_outer: usize,
    #[serde(rename = "K1")]
    pub prune_from: usize,
    #[serde(rename = "K2")]
    pub collapse_from: usize,
    pub itmax: usize,
    #[serde(rename = "tR")]
    pub tol_support: f64,
    #[serde(rename = "tF")]
    pub tol_fixed: f64,
    pub seed: u64,
    pub data: String,
    pub group: String,
    pub response: String,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub standardize: Vec<String>,
    pub n_groups: usize,
    pub n_obs: usize,
    pub n_dropped: usize,
}

#[derive(Debug, Serialize)]
pub struct SupportEntry {
    pub point: Vec<f64>,
    pub weight: f64,
    /// Standard error per coordinate; `null` entries mark coordinates whose
    /// curvature estimate failed.
    pub stderr: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct BetaEntry {
    pub name: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EntropyBlock {
    pub per_group: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Serialize)]
pub struct ConvergedBlock {
    pub conv1: bool,
    pub conv2: bool,
    pub iterations: usize,
}

/// Top-level JSON document written by `fit`.
#[derive(Debug, Serialize)]
pub struct FitReport {
    pub config: ConfigEcho,
    pub m_hat: usize,
    pub support: Vec<SupportEntry>,
    pub beta: Vec<BetaEntry>,
    /// Cluster label per group, `1..=m_hat`, in group order.
    pub assignments: Vec<usize>,
    pub entropy: EntropyBlock,
    pub loglik_trace: Vec<TracePoint>,
    pub converged: ConvergedBlock,
}

/// Assemble the JSON document from a fit result. `beta_names` labels the
/// fixed effects in design order.
pub fn build_fit_report(config: ConfigEcho, beta_names: &[String], result: &FitResult) -> FitReport {
    let support = (0..result.support.n_points())
        .map(|m| SupportEntry {
            point: result.support.point(m).to_vec(),
            weight: result.support.weight(m),
            stderr: result.support_stderr[m].clone(),
        })
        .collect();
    let beta = result
        .beta
        .iter()
        .enumerate()
        .map(|(j, &estimate)| BetaEntry {
            name: beta_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("x{}", j + 1)),
            estimate,
            stderr: result.beta_stderr.as_ref().map(|se| se[j]),
            p_value: result.beta_p_values.as_ref().and_then(|ps| ps[j]),
        })
        .collect();
    FitReport {
        config,
        m_hat: result.support.n_points(),
        support,
        beta,
        assignments: result.assignments.clone(),
        entropy: EntropyBlock {
            per_group: result.entropy.clone(),
            mean: result.mean_entropy,
        },
        loglik_trace: result.loglik_trace.clone(),
        converged: ConvergedBlock {
            conv1: result.converged_params,
            conv2: result.converged_clusters,
            iterations: result.iterations,
        },
    }
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

/// One row per group: label, hard cluster assignment, and the posterior
/// membership row.
pub fn write_assignments_csv(
    path: &Path,
    data: &HierarchicalDataset,
    result: &FitResult,
) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let m = result.support.n_points();
    let mut header = vec!["group".to_string(), "cluster".to_string()];
    header.extend((1..=m).map(|k| format!("w{k}")));
    writer.write_record(&header)?;
    for i in 0..data.n_groups() {
        let mut record = vec![data.group_label(i).to_string(), result.assignments[i].to_string()];
        record.extend(result.weights.row(i).iter().map(|&v| fmt_f64(v)));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// One row per replicate across all criteria of a study. Vector-valued
/// fields pack coordinates with `:` and points with `;`.
pub fn write_replicates_csv(path: &Path, reports: &[StudyReport]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    writer.write_record([
        "criterion",
        "replicate",
        "fit_seed",
        "error",
        "m_hat",
        "converged",
        "iterations",
        "mean_entropy",
        "loglik",
        "mse",
        "mse_log",
        "chi_square",
        "sensitivity",
        "specificity",
        "accuracy",
        "min_inner_loglik_delta",
        "max_weight_sum_error",
        "max_posterior_row_error",
        "merges_within_segment",
        "n_merges",
        "support_points",
        "weights",
        "beta",
    ])?;
    for report in reports {
        for r in &report.records {
            let support = r.support_points.as_ref().map_or(String::new(), |points| {
                points
                    .iter()
                    .map(|p| p.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(":"))
                    .collect::<Vec<_>>()
                    .join(";")
            });
            let pack = |values: &Option<Vec<f64>>| {
                values.as_ref().map_or(String::new(), |vs| {
                    vs.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(";")
                })
            };
            writer.write_record([
                report.criterion.clone(),
                r.replicate.to_string(),
                r.fit_seed.to_string(),
                r.error.clone().unwrap_or_default(),
                fmt_opt(&r.m_hat),
                fmt_opt(&r.converged),
                fmt_opt(&r.iterations),
                fmt_opt_f64(r.mean_entropy),
                fmt_opt_f64(r.loglik),
                fmt_opt_f64(r.mse),
                fmt_opt_f64(r.mse_log),
                fmt_opt_f64(r.chi_square),
                fmt_opt_f64(r.sensitivity),
                fmt_opt_f64(r.specificity),
                fmt_opt_f64(r.accuracy),
                fmt_opt_f64(r.min_inner_loglik_delta),
                fmt_opt_f64(r.max_weight_sum_error),
                fmt_opt_f64(r.max_posterior_row_error),
                fmt_opt(&r.merges_within_segment),
                fmt_opt(&r.n_merges),
                support,
                pack(&r.weights),
                pack(&r.beta),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Plot-ready `(t, mean_entropy, m_hat)` table.
pub fn write_scan_csv(path: &Path, points: &[ElbowPoint]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    writer.write_record(["t", "mean_entropy", "m_hat"])?;
    for p in points {
        writer.write_record([fmt_f64(p.t), fmt_f64(p.mean_entropy), p.m_hat.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}
