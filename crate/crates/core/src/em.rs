//! EM engine for mixtures with discrete random effects.
//!
//! The model places the random coefficients on `M` support points with
//! masses `ω_m`. Estimation alternates an E-step (posterior membership
//! weights per group), a mass update (column means), pruning of clusters
//! nobody claims, an inner loop that alternates support-point and
//! fixed-coefficient maximizations, and — between outer iterations — a
//! collapse step that merges support points the data cannot distinguish.
//! The collapse tests live in [`crate::collapse`]; curvature-based
//! variances in [`crate::inference`].

use rand::{Rng, SeedableRng};

use crate::data::HierarchicalDataset;
use crate::error::{Error, Result};
use crate::family::{
    self, dot, fixed_linear_part, group_loglik_matrix, log_density_at, mixture_loglik, Family,
};
use crate::optim::{maximize, OptimProblem};

/// Tolerance on `|Σω − 1|` for a valid mixing distribution.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Tolerance on `|Σ_m W_im − 1|` for valid posterior rows.
pub const POSTERIOR_ROW_TOL: f64 = 1e-10;

/// Coefficient clamp applied to per-group starting fits that are degenerate
/// or did not converge (linear-predictor scale).
const INIT_COEF_CLAMP: f64 = 10.0;

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// A discrete mixing distribution: `M` support points in `R^Q` with masses
/// summing to one.
#[derive(Debug, Clone)]
pub struct DiscreteSupport {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteSupport {
    /// Validating constructor.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("support must contain at least one point".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let q = points[0].len();
        if q == 0 {
            return Err(Error::Invalid("support points must have at least one coordinate".into()));
        }
        for (m, point) in points.iter().enumerate() {
            if point.len() != q {
                return Err(Error::Dimension(format!(
                    "support point {m} has {} coordinates, expected {q}",
                    point.len()
                )));
            }
            if point.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("support point {m} is not finite")));
            }
        }
        for (m, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Invalid(format!("weight {m} is {w}, must be in [0, 1]")));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invalid(format!(
                "support weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Number of support points `M`.
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Dimension `Q` of each point.
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Coordinates of point `m`.
    pub fn point(&self, m: usize) -> &[f64] {
        &self.points[m]
    }

    /// All points.
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// All masses.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mass of point `m`.
    pub fn weight(&self, m: usize) -> f64 {
        self.weights[m]
    }

    /// Replace the point coordinates, keeping masses (inner-loop update).
    pub(crate) fn set_points(&mut self, points: Vec<Vec<f64>>) {
        debug_assert_eq!(points.len(), self.weights.len());
        self.points = points;
    }

    /// Replace the masses after a column-mean update.
    pub(crate) fn set_weights(&mut self, weights: Vec<f64>) {
        debug_assert_eq!(weights.len(), self.points.len());
        self.weights = weights;
    }

    /// Remove the points at `drop` (sorted ascending) and renormalize the
    /// remaining masses to sum to one. Returns `|Σω − 1|` *before* the
    /// renormalization of the survivors, for conservation accounting.
    pub(crate) fn remove_and_renormalize(&mut self, drop: &[usize]) {
        if drop.is_empty() {
            return;
        }
        let mut keep_points = Vec::with_capacity(self.points.len() - drop.len());
        let mut keep_weights = Vec::with_capacity(self.weights.len() - drop.len());
        for m in 0..self.points.len() {
            if !drop.contains(&m) {
                keep_points.push(std::mem::take(&mut self.points[m]));
                keep_weights.push(self.weights[m]);
            }
        }
        let total: f64 = keep_weights.iter().sum();
        for w in &mut keep_weights {
            *w /= total;
        }
        self.points = keep_points;
        self.weights = keep_weights;
    }

    /// Merge points `a` and `b` into their mass-weighted mean with the summed
    /// mass; the merged point replaces index `min(a, b)` and the other slot is
    /// removed. Returns the merged point for diagnostics.
    pub(crate) fn merge_pair(&mut self, a: usize, b: usize) -> Vec<f64> {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (child, mass) = crate::collapse::merge_points(
            &self.points[lo],
            self.weights[lo],
            &self.points[hi],
            self.weights[hi],
        );
        self.points[lo] = child.clone();
        self.weights[lo] = mass;
        self.points.remove(hi);
        self.weights.remove(hi);
        child
    }

    /// Copy sorted by ascending first coordinate (ties: remaining coordinates,
    /// then original index — fully deterministic). Also returns the
    /// permutation `perm` with `sorted[k] = original[perm[k]]`.
    pub fn sorted_by_first_coordinate(&self) -> (Self, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.n_points()).collect();
        order.sort_by(|&a, &b| {
            for (va, vb) in self.points[a].iter().zip(&self.points[b]) {
                match va.total_cmp(vb) {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            a.cmp(&b)
        });
        let sorted = Self {
            points: order.iter().map(|&m| self.points[m].clone()).collect(),
            weights: order.iter().map(|&m| self.weights[m]).collect(),
        };
        (sorted, order)
    }
}

/// Posterior membership probabilities: `N × M`, each row a distribution.
#[derive(Debug, Clone)]
pub struct PosteriorWeights {
    values: Vec<f64>,
    n: usize,
    m: usize,
}

impl PosteriorWeights {
    /// Validating constructor over a row-major `n × m` matrix.
    pub fn new(values: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::Dimension(format!(
                "{} entries for a {n} × {m} posterior matrix",
                values.len()
            )));
        }
        for i in 0..n {
            let row = &values[i * m..(i + 1) * m];
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Invalid(format!(
                    "posterior row {i} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > POSTERIOR_ROW_TOL {
                return Err(Error::Invalid(format!(
                    "posterior row {i} sums to {sum}, expected 1 within {POSTERIOR_ROW_TOL}"
                )));
            }
        }
        Ok(Self { values, n, m })
    }

    /// Number of groups (rows).
    pub fn n_groups(&self) -> usize {
        self.n
    }

    /// Number of clusters (columns).
    pub fn n_clusters(&self) -> usize {
        self.m
    }

    /// Entry `(i, m)`.
    #[inline]
    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.values[i * self.m + m]
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// Copy of column `m`.
    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, m)).collect()
    }

    /// Whether every entry in column `m` is exactly zero (total underflow).
    pub fn column_is_zero(&self, m: usize) -> bool {
        (0..self.n).all(|i| self.get(i, m) == 0.0)
    }

    /// Largest `|Σ_m W_im − 1|` across rows.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Copy with columns permuted: `new[i][k] = old[i][perm[k]]`.
    pub(crate) fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.n {
            for &k in perm {
                values.push(self.get(i, k));
            }
        }
        Self {
            values,
            n: self.n,
            m: self.m,
        }
    }
}

/// Rule deciding when two support points should be merged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CollapseCriterion {
    /// Merge when `(1−α)` confidence regions of two points overlap.
    ConfidenceLevel(f64),
    /// Merge when the Euclidean distance between two points falls below `t`.
    DistanceThreshold(f64),
}

impl CollapseCriterion {
    fn validate(&self) -> Result<()> {
        match *self {
            CollapseCriterion::ConfidenceLevel(alpha) => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::Invalid(format!(
                        "confidence level alpha must lie in (0, 1), got {alpha}"
                    )));
                }
            }
            CollapseCriterion::DistanceThreshold(t) => {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::Invalid(format!(
                        "distance threshold must be positive and finite, got {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Estimation settings. Field names follow roles; the conventional symbols
/// are noted for cross-reference with configs (`K`, `K1`, `K2`, `itmax`,
/// `tR`, `tF`).
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub family: Family,
    pub criterion: CollapseCriterion,
    /// Outer iteration cap `K`.
    pub max_outer: usize,
    /// Iteration from which unclaimed clusters are force-pruned (`K1`).
    pub prune_from: usize,
    /// Iteration after which confidence-region merging starts (`K2`).
    pub collapse_from: usize,
    /// Inner alternating-maximization cap per outer iteration (`itmax`).
    pub max_inner: usize,
    /// Convergence tolerance on support points (`tR`).
    pub tol_support: f64,
    /// Convergence tolerance on fixed coefficients (`tF`).
    pub tol_fixed: f64,
    /// Optional cap `Ñ` on the number of starting support points.
    pub support_cap: Option<usize>,
    /// Seed for the starting-value draws; equal seeds give identical fits.
    pub seed: u64,
    /// Compute fixed-effect standard errors and likelihood-ratio p-values at
    /// the end of the fit (simulation drivers switch this off; they never
    /// report them).
    pub compute_inference: bool,
}

impl FitConfig {
    /// Defaults: `K=60`, `K1=20`, `K2=5`, `itmax=20`, `tR=tF=1e-5`.
    pub fn new(family: Family, criterion: CollapseCriterion) -> Self {
        Self {
            family,
            criterion,
            max_outer: 60,
            prune_from: 20,
            collapse_from: 5,
            max_inner: 20,
            tol_support: 1e-5,
            tol_fixed: 1e-5,
            support_cap: None,
            seed: 0,
            compute_inference: true,
        }
    }

    /// Check ranges and orderings (`0 < K2 < K1 ≤ K`, positive tolerances).
    pub fn validate(&self) -> Result<()> {
        self.criterion.validate()?;
        if self.collapse_from == 0 || self.collapse_from >= self.prune_from {
            return Err(Error::Invalid(format!(
                "iteration thresholds must satisfy 0 < K2 < K1, got K2={} K1={}",
                self.collapse_from, self.prune_from
            )));
        }
        if self.prune_from > self.max_outer {
            return Err(Error::Invalid(format!(
                "prune threshold K1={} exceeds outer cap K={}",
                self.prune_from, self.max_outer
            )));
        }
        if self.max_inner == 0 {
            return Err(Error::Invalid("inner iteration cap must be at least 1".into()));
        }
        let tolerances_valid = self.tol_support > 0.0 && self.tol_fixed > 0.0;
        if !tolerances_valid {
            return Err(Error::Invalid(format!(
                "tolerances must be positive, got tR={} tF={}",
                self.tol_support, self.tol_fixed
            )));
        }
        if self.support_cap == Some(0) {
            return Err(Error::Invalid("support cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// One record of the outer-iteration likelihood trace.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// True mixture log-likelihood at the end of the iteration.
    pub loglik: f64,
    /// Number of support points at the end of the iteration.
    pub m: usize,
}

/// Conservation and monotonicity bookkeeping accumulated across a fit.
///
/// These are measured after *every* relevant event (E-step, mass update,
/// renormalization, merge), not only at the end, so audits can bound the
/// worst intermediate state.
#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    /// Most negative change of the mixture log-likelihood between
    /// consecutive inner-loop iterations (`+inf` when no two iterations ran).
    pub min_inner_loglik_delta: f64,
    /// Largest `|Σω − 1|` observed after any mass update, renormalization,
    /// or merge.
    pub max_weight_sum_error: f64,
    /// Largest `|Σ_m W_im − 1|` observed after any E-step.
    pub max_posterior_row_error: f64,
    /// Whether every merged point stayed coordinate-wise between its parents.
    pub merges_within_segment: bool,
    /// Number of pair merges performed (both criteria).
    pub n_merges: usize,
}

impl FitDiagnostics {
    fn new() -> Self {
        Self {
            min_inner_loglik_delta: f64::INFINITY,
            max_weight_sum_error: 0.0,
            max_posterior_row_error: 0.0,
            merges_within_segment: true,
            n_merges: 0,
        }
    }

    fn record_weight_sum(&mut self, weights: &[f64]) {
        let err = (weights.iter().sum::<f64>() - 1.0).abs();
        self.max_weight_sum_error = self.max_weight_sum_error.max(err);
    }

    fn record_merge(&mut self, parent_a: &[f64], parent_b: &[f64], child: &[f64]) {
        self.n_merges += 1;
        for ((&a, &b), &c) in parent_a.iter().zip(parent_b).zip(child) {
            let lo = a.min(b) - 1e-12;
            let hi = a.max(b) + 1e-12;
            if !(lo <= c && c <= hi) {
                self.merges_within_segment = false;
            }
        }
    }
}

/// Result of a full fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Estimated mixing distribution, sorted by ascending first coordinate.
    pub support: DiscreteSupport,
    /// Standard errors of each support point's coordinates (same order).
    pub support_stderr: Vec<Vec<f64>>,
    /// Fixed-effect estimates.
    pub beta: Vec<f64>,
    /// Fixed-effect standard errors (when inference was requested).
    pub beta_stderr: Option<Vec<f64>>,
    /// Likelihood-ratio p-values per fixed effect; `None` inside the vector
    /// marks a reduced fit that did not converge (never fabricated).
    pub beta_p_values: Option<Vec<Option<f64>>>,
    /// Posterior membership probabilities at the final parameters.
    pub weights: PosteriorWeights,
    /// Hard cluster labels per group, `1..=M`, aligned with the sorted support.
    pub assignments: Vec<usize>,
    /// Posterior entropy per group.
    pub entropy: Vec<f64>,
    /// Average posterior entropy.
    pub mean_entropy: f64,
    /// Mixture log-likelihood at the end of each outer iteration.
    pub loglik_trace: Vec<TracePoint>,
    /// Parameter-delta convergence flag (`conv1`).
    pub converged_params: bool,
    /// Cluster-stability convergence flag (`conv2`).
    pub converged_clusters: bool,
    /// Outer iterations performed.
    pub iterations: usize,
    /// Conservation/monotonicity audit trail.
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Whether both convergence flags were reached before the iteration cap.
    pub fn converged(&self) -> bool {
        self.converged_params && self.converged_clusters
    }

    /// Fitted means `μ̂_ij` using each group's assigned support point.
    pub fn fitted_means(&self, data: &HierarchicalDataset, family: Family) -> Result<Vec<f64>> {
        let zero_based: Vec<usize> = self.assignments.iter().map(|&l| l - 1).collect();
        family::fitted_means(data, family, &self.beta, self.support.points(), &zero_based)
    }
}

// ---------------------------------------------------------------------------
// Starting values
// ---------------------------------------------------------------------------

/// Interquartile-range whisker interval `[q1 − 1.5·IQR, q3 + 1.5·IQR]` over
/// `values` (type-7 quartiles). A zero-IQR pool widens to
/// `v ± max(0.5, 0.1·|v|)` so sampling stays possible.
pub(crate) fn whisker_range(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_type7(&sorted, 0.25);
    let q3 = quantile_type7(&sorted, 0.75);
    let iqr = q3 - q1;
    if iqr == 0.0 {
        let half = (0.1 * q1.abs()).max(0.5);
        (q1 - half, q1 + half)
    } else {
        (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
    }
}

/// Quantile with linear interpolation between order statistics (R type 7):
/// index `h = (n−1)p`, value `x[⌊h⌋] + (h−⌊h⌋)(x[⌊h⌋+1] − x[⌊h⌋])`.
pub(crate) fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_type7(&sorted, 0.5)
}

fn response_is_degenerate(data: &HierarchicalDataset, group: usize) -> bool {
    let mut rows = data.group_rows(group);
    let first = rows.next().map(|j| data.response(j));
    match first {
        None => true,
        Some(y0) => rows.all(|j| data.response(j) == y0),
    }
}

fn clean_coefficients(raw: &[f64], clamp: bool) -> Vec<f64> {
    raw.iter()
        .map(|&v| {
            let v = if v.is_finite() { v } else { 0.0 };
            if clamp {
                v.clamp(-INIT_COEF_CLAMP, INIT_COEF_CLAMP)
            } else {
                v
            }
        })
        .collect()
}

/// Starting support and fixed coefficients.
///
/// Fits an independent GLM per group over the joint `(c_i, β_i)` coefficient
/// vector, pools the random-coordinate estimates into a boxplot-whisker
/// interval per coordinate, draws `M = min(N, Ñ)` support points uniformly
/// inside the box (mass `1/M` each), and starts β at the coordinate-wise
/// median of the per-group fixed coefficients. Degenerate Bernoulli groups
/// (all-0/all-1) and non-converged group fits contribute clamped
/// coefficients; if every group fit errors out, initialization fails.
pub fn init_parameters(
    data: &HierarchicalDataset,
    family: Family,
    support_cap: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(DiscreteSupport, Vec<f64>)> {
    let n = data.n_groups();
    let p = data.n_fixed();
    let q = data.n_random();

    let mut random_coefs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut fixed_coefs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut failures = 0usize;
    for i in 0..n {
        let objective = |theta: &[f64]| {
            let (c, b) = theta.split_at(q);
            let mut total = 0.0;
            for j in data.group_rows(i) {
                let eta = dot(data.x_row(j), b) + dot(data.z_row(j), c);
                total += log_density_at(data, family, j, eta);
            }
            total
        };
        let problem = OptimProblem::new(&objective, vec![0.0; q + p]);
        match maximize(&problem) {
            Ok(outcome) => {
                let degenerate =
                    family == Family::Bernoulli && response_is_degenerate(data, i);
                let clamp = degenerate || !outcome.converged;
                if clamp {
                    log::debug!(
                        "group {} starting fit {} — clamping coefficients to ±{INIT_COEF_CLAMP}",
                        data.group_label(i),
                        if degenerate { "is degenerate" } else { "did not converge" },
                    );
                }
                let (c, b) = outcome.x.split_at(q);
                random_coefs.push(clean_coefficients(c, clamp));
                fixed_coefs.push(clean_coefficients(b, clamp));
            }
            Err(err) => {
                log::warn!(
                    "starting fit failed for group {}: {err}; using zeros",
                    data.group_label(i)
                );
                failures += 1;
                random_coefs.push(vec![0.0; q]);
                fixed_coefs.push(vec![0.0; p]);
            }
        }
    }
    if failures == n {
        return Err(Error::Init(format!(
            "all {n} per-group starting fits failed"
        )));
    }

    let m = match support_cap {
        Some(cap) => cap.min(n),
        None => n,
    };
    let ranges: Vec<(f64, f64)> = (0..q)
        .map(|h| {
            let pool: Vec<f64> = random_coefs.iter().map(|c| c[h]).collect();
            whisker_range(&pool)
        })
        .collect();
    let mut points = Vec::with_capacity(m);
    for _ in 0..m {
        let point: Vec<f64> = ranges
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect();
        points.push(point);
    }
    let weights = vec![1.0 / m as f64; m];

    let beta = (0..p)
        .map(|col| {
            let pool: Vec<f64> = fixed_coefs.iter().map(|b| b[col]).collect();
            median(&pool)
        })
        .collect();

    Ok((DiscreteSupport::new(points, weights)?, beta))
}

// ---------------------------------------------------------------------------
// E-step, mass update, M-steps
// ---------------------------------------------------------------------------

/// Posterior membership probabilities
/// `W_im = ω_m p(y_i|β,c_m) / Σ_k ω_k p(y_i|β,c_k)`, computed in log space
/// with a per-row max shift. A group whose every component underflows even in
/// log space is a numerical error naming that group.
pub fn e_step(
    data: &HierarchicalDataset,
    family: Family,
    beta: &[f64],
    support: &DiscreteSupport,
) -> Result<PosteriorWeights> {
    let ll = group_loglik_matrix(data, family, beta, support.points())?;
    e_step_from_loglik(data, &ll, support.weights())
}

fn e_step_from_loglik(
    data: &HierarchicalDataset,
    loglik: &[f64],
    weights: &[f64],
) -> Result<PosteriorWeights> {
    let n = data.n_groups();
    let m = weights.len();
    let log_weights: Vec<f64> = weights
        .iter()
        .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let mut values = vec![0.0; n * m];
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|k| log_weights[k] + loglik[i * m + k])
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical(format!(
                "posterior weights underflowed for group {}",
                data.group_label(i)
            )));
        }
        let unnormalized: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total: f64 = unnormalized.iter().sum();
        for k in 0..m {
            values[i * m + k] = unnormalized[k] / total;
        }
    }
    PosteriorWeights::new(values, n, m)
}

/// Mass update: column means of the posterior matrix, renormalized so the
/// result sums to one exactly up to rounding.
pub fn update_weights(w: &PosteriorWeights) -> Vec<f64> {
    let n = w.n_groups() as f64;
    let mut weights: Vec<f64> = (0..w.n_clusters())
        .map(|k| w.column(k).iter().sum::<f64>() / n)
        .collect();
    let total: f64 = weights.iter().sum();
    for v in &mut weights {
        *v /= total;
    }
    weights
}

/// Support-point update: for each cluster `m`, maximize the posterior-weighted
/// group log-likelihood `Σ_i W_im ln p(y_i|β,c)` starting from the current
/// point. A cluster with an all-zero posterior column has a flat objective
/// and keeps its point; an optimizer failure keeps the previous point with a
/// warning (never aborts the fit).
pub fn m_step_support(
    data: &HierarchicalDataset,
    family: Family,
    w: &PosteriorWeights,
    beta: &[f64],
    points: &[Vec<f64>],
    bounds: Option<&[(f64, f64)]>,
) -> Result<Vec<Vec<f64>>> {
    if w.n_clusters() != points.len() {
        return Err(Error::Dimension(format!(
            "posterior matrix has {} columns but {} support points given",
            w.n_clusters(),
            points.len()
        )));
    }
    let fixed_part = fixed_linear_part(data, beta);
    let mut updated = Vec::with_capacity(points.len());
    for (m, point) in points.iter().enumerate() {
        let column = w.column(m);
        if column.iter().all(|&v| v == 0.0) {
            updated.push(point.clone());
            continue;
        }
        let objective = |c: &[f64]| {
            let mut total = 0.0;
            for (i, &wi) in column.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let mut group_ll = 0.0;
                for j in data.group_rows(i) {
                    let eta = fixed_part[j] + dot(data.z_row(j), c);
                    group_ll += log_density_at(data, family, j, eta);
                }
                total += wi * group_ll;
            }
            total
        };
        let mut problem = OptimProblem::new(&objective, point.clone());
        if let Some(bounds) = bounds {
            problem = problem.with_bounds(bounds.to_vec());
        }
        match maximize(&problem) {
            Ok(outcome) => {
                if !outcome.converged {
                    log::debug!("support-point update {m} stopped at its evaluation budget");
                }
                updated.push(outcome.x);
            }
            Err(err) => {
                log::warn!("support-point update {m} failed ({err}); keeping previous value");
                updated.push(point.clone());
            }
        }
    }
    Ok(updated)
}

/// Fixed-coefficient update: maximize
/// `Σ_m Σ_i W_im ln p(y_i|β,c_m)` over β starting from the current value.
/// With no fixed covariates this is a no-op returning the empty vector.
pub fn m_step_fixed(
    data: &HierarchicalDataset,
    family: Family,
    w: &PosteriorWeights,
    beta: &[f64],
    points: &[Vec<f64>],
    bounds: Option<&[(f64, f64)]>,
) -> Result<Vec<f64>> {
    if data.n_fixed() == 0 {
        return Ok(Vec::new());
    }
    if w.n_clusters() != points.len() {
        return Err(Error::Dimension(format!(
            "posterior matrix has {} columns but {} support points given",
            w.n_clusters(),
            points.len()
        )));
    }
    let m = points.len();
    // Random contributions z'c_m do not depend on β: precompute J × M.
    let mut random_part = vec![0.0; data.n_obs() * m];
    for (k, point) in points.iter().enumerate() {
        for j in 0..data.n_obs() {
            random_part[j * m + k] = dot(data.z_row(j), point);
        }
    }
    // Observation → group lookup.
    let mut group_of = vec![0usize; data.n_obs()];
    for i in 0..data.n_groups() {
        for j in data.group_rows(i) {
            group_of[j] = i;
        }
    }
    let objective = |b: &[f64]| {
        let mut total = 0.0;
        for j in 0..data.n_obs() {
            let xb = dot(data.x_row(j), b);
            let gi = group_of[j];
            for k in 0..m {
                let wik = w.get(gi, k);
                if wik == 0.0 {
                    continue;
                }
                total += wik * log_density_at(data, family, j, xb + random_part[j * m + k]);
            }
        }
        total
    };
    let mut problem = OptimProblem::new(&objective, beta.to_vec());
    if let Some(bounds) = bounds {
        problem = problem.with_bounds(bounds.to_vec());
    }
    let outcome = maximize(&problem)?;
    if !outcome.converged {
        log::debug!("fixed-coefficient update stopped at its evaluation budget");
    }
    Ok(outcome.x)
}

// ---------------------------------------------------------------------------
// Inner alternating loop
// ---------------------------------------------------------------------------

/// Outcome of the inner alternating maximization.
#[derive(Debug, Clone)]
pub struct InnerEmOutcome {
    pub points: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    /// Iterations actually performed (at least 1).
    pub iterations: usize,
    /// Whether both parameter deltas fell below tolerance.
    pub converged: bool,
    /// Most negative mixture-log-likelihood change between consecutive
    /// iterations (`+inf` with a single iteration).
    pub min_loglik_delta: f64,
}

/// Alternate support-point and fixed-coefficient maximizations at fixed `M`
/// and masses until `max|Δc| ≤ tR` and `max|Δβ| ≤ tF`, or `itmax`.
///
/// The first iteration uses the posterior matrix `w` supplied by the caller
/// (computed at the incoming parameters); every later iteration refreshes the
/// posterior at the current parameters, so each iteration is a complete EM
/// cycle and the mixture log-likelihood cannot decrease. The refresh reuses
/// the group log-density matrix already needed for the likelihood, so it
/// costs nothing extra.
pub fn inner_em(
    data: &HierarchicalDataset,
    family: Family,
    w: &PosteriorWeights,
    support: &DiscreteSupport,
    beta: &[f64],
    config: &FitConfig,
) -> Result<InnerEmOutcome> {
    let mut points = support.points().to_vec();
    let mut beta = beta.to_vec();
    let weights = support.weights();
    let mut previous_loglik = mixture_loglik(data, family, &beta, &points, weights)?;
    let mut min_delta = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut current_w: Option<PosteriorWeights> = None;
    for _ in 0..config.max_inner {
        iterations += 1;
        let w_it = current_w.as_ref().unwrap_or(w);
        let new_points = m_step_support(data, family, w_it, &beta, &points, None)?;
        let delta_support = max_point_delta(&new_points, &points);
        points = new_points;
        let new_beta = m_step_fixed(data, family, w_it, &beta, &points, None)?;
        let delta_fixed = max_abs_delta(&new_beta, &beta);
        beta = new_beta;
        let loglik_matrix = group_loglik_matrix(data, family, &beta, &points)?;
        let loglik = family::mixture_loglik_from_matrix(data, &loglik_matrix, weights)?;
        min_delta = min_delta.min(loglik - previous_loglik);
        previous_loglik = loglik;
        if delta_support <= config.tol_support && delta_fixed <= config.tol_fixed {
            converged = true;
            break;
        }
        current_w = Some(e_step_from_loglik(data, &loglik_matrix, weights)?);
    }
    Ok(InnerEmOutcome {
        points,
        beta,
        iterations,
        converged,
        min_loglik_delta: min_delta,
    })
}

fn max_point_delta(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| max_abs_delta(pa, pb))
        .fold(0.0, f64::max)
}

fn max_abs_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Assignment and pruning
// ---------------------------------------------------------------------------

/// Hard cluster labels: `argmax_m W_im` per group, 0-based, ties resolved to
/// the lowest cluster index.
pub fn assign_groups(w: &PosteriorWeights) -> Vec<usize> {
    (0..w.n_groups())
        .map(|i| {
            let row = w.row(i);
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// How aggressively [`check_weights`] prunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneStage {
    /// Remove only clusters whose posterior column underflowed to all zeros.
    ZeroColumns,
    /// Additionally remove clusters that are nobody's argmax (applied once
    /// parameters have converged or from iteration `K1` on).
    Assignments,
}

/// Outcome of a pruning pass.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub support: DiscreteSupport,
    /// Indices (into the incoming support) removed for all-zero columns.
    pub removed_empty: Vec<usize>,
    /// Indices removed because no group selected them.
    pub removed_unassigned: Vec<usize>,
    /// `conv2`: the assignment pass ran and removed nothing.
    pub clusters_stable: bool,
}

/// Remove dead clusters and renormalize the masses.
///
/// The all-zero-column pass always runs when `M > 1`. The assignment pass
/// (stage [`PruneStage::Assignments`]) computes `argmax` labels over the
/// surviving columns and removes clusters no group selected. The caller must
/// refresh the posterior matrix afterwards; the returned one-column-shorter
/// matrix is not rescaled here.
pub fn check_weights(
    support: &DiscreteSupport,
    w: &PosteriorWeights,
    stage: PruneStage,
) -> Result<PruneOutcome> {
    let m = support.n_points();
    if w.n_clusters() != m {
        return Err(Error::Dimension(format!(
            "posterior matrix has {} columns but the support has {m} points",
            w.n_clusters()
        )));
    }
    let mut keep: Vec<bool> = vec![true; m];
    let mut removed_empty = Vec::new();
    if m > 1 {
        for (k, flag) in keep.iter_mut().enumerate() {
            if w.column_is_zero(k) {
                *flag = false;
                removed_empty.push(k);
            }
        }
    }

    let mut removed_unassigned = Vec::new();
    let mut assignment_ran = false;
    if stage == PruneStage::Assignments {
        assignment_ran = true;
        let survivors: Vec<usize> = (0..m).filter(|&k| keep[k]).collect();
        // Argmax per group over surviving columns, lowest index on ties.
        let mut claimed = vec![false; m];
        for i in 0..w.n_groups() {
            let mut best = survivors[0];
            for &k in &survivors[1..] {
                if w.get(i, k) > w.get(i, best) {
                    best = k;
                }
            }
            claimed[best] = true;
        }
        if survivors.len() > 1 {
            for &k in &survivors {
                if !claimed[k] {
                    keep[k] = false;
                    removed_unassigned.push(k);
                }
            }
        }
    }

    let drop: Vec<usize> = (0..m).filter(|&k| !keep[k]).collect();
    let mut pruned = support.clone();
    pruned.remove_and_renormalize(&drop);
    let clusters_stable = assignment_ran && removed_unassigned.is_empty();
    Ok(PruneOutcome {
        support: pruned,
        removed_empty,
        removed_unassigned,
        clusters_stable,
    })
}

// ---------------------------------------------------------------------------
// Outer estimation loop
// ---------------------------------------------------------------------------

/// Fit the mixture model, discovering the number of clusters.
///
/// Starting from per-group fits (see [`init_parameters`]), each outer
/// iteration runs: distance-criterion collapse (threshold rule only), an
/// E-step, the mass update, pruning of dead clusters, a refreshed E-step,
/// the inner alternating maximization, and — from iteration `K2+1` on under
/// the confidence rule — at most one confidence-region merge. The loop ends
/// when parameters stop moving (`conv1`; under the confidence rule this also
/// requires a scan that rejected every candidate pair) and the cluster set
/// survives an assignment-based prune unchanged (`conv2`), or at the
/// iteration cap.
///
/// Identical inputs produce bitwise-identical results: the only randomness is
/// the starting-value draw seeded from `config.seed`.
pub fn fit(data: &HierarchicalDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    data.validate_for(config.family)?;
    let family = config.family;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(config.seed);
    let (mut support, mut beta) = init_parameters(data, family, config.support_cap, &mut rng)?;

    let mut diagnostics = FitDiagnostics::new();
    diagnostics.record_weight_sum(support.weights());
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut converged_params = false; // conv1: parameter deltas below tolerance
    let mut converged_clusters = false; // conv2: assignment prune removed nothing
    let mut prev_points = support.points().to_vec();
    let mut prev_beta = beta.clone();
    let mut iterations = 0usize;

    let mut k = 1usize;
    while (!converged_params || !converged_clusters) && k < config.max_outer {
        iterations = k;

        // Distance-criterion collapse at the top of the iteration.
        if let CollapseCriterion::DistanceThreshold(t) = config.criterion {
            let events = crate::collapse::t_collapse(&mut support, t);
            for event in &events {
                diagnostics.record_merge(&event.parent_a, &event.parent_b, &event.child);
            }
            if !events.is_empty() {
                diagnostics.record_weight_sum(support.weights());
            }
        }

        // E-step and mass update.
        let w = e_step(data, family, &beta, &support)?;
        diagnostics.max_posterior_row_error = diagnostics
            .max_posterior_row_error
            .max(w.max_row_sum_error());
        support.set_weights(update_weights(&w));
        diagnostics.record_weight_sum(support.weights());

        // Prune dead clusters; assignment-based pruning applies once the
        // parameters have converged or from iteration `K1` on.
        let stage = if converged_params || k >= config.prune_from {
            PruneStage::Assignments
        } else {
            PruneStage::ZeroColumns
        };
        let prune = check_weights(&support, &w, stage)?;
        if !prune.removed_unassigned.is_empty() {
            converged_params = false;
        }
        converged_clusters = prune.clusters_stable;
        support = prune.support;
        diagnostics.record_weight_sum(support.weights());

        // Refresh the posterior for the (possibly smaller) support.
        let w = e_step(data, family, &beta, &support)?;
        diagnostics.max_posterior_row_error = diagnostics
            .max_posterior_row_error
            .max(w.max_row_sum_error());

        // Inner alternating maximization.
        let inner = inner_em(data, family, &w, &support, &beta, config)?;
        support.set_points(inner.points);
        beta = inner.beta;
        diagnostics.min_inner_loglik_delta = diagnostics
            .min_inner_loglik_delta
            .min(inner.min_loglik_delta);

        // Confidence-criterion collapse after the inner loop, from iteration
        // `K2+1` on. Variances are recomputed once per outer iteration here.
        let mut scan_all_rejected = false;
        if let CollapseCriterion::ConfidenceLevel(alpha) = config.criterion {
            if k > config.collapse_from {
                let covariances: Vec<Option<crate::inference::CovarianceEstimate>> = (0
                    ..support.n_points())
                    .map(|m| {
                        match crate::inference::support_point_variance(
                            data, family, &w, &beta, &support, m,
                        ) {
                            Ok(cov) => Some(cov),
                            Err(err) => {
                                log::warn!(
                                    "variance of support point {m} unavailable at iteration {k}: {err}"
                                );
                                None
                            }
                        }
                    })
                    .collect();
                let scan = crate::collapse::alpha_collapse_once(&mut support, &covariances, alpha)?;
                for event in &scan.events {
                    diagnostics.record_merge(&event.parent_a, &event.parent_b, &event.child);
                }
                if scan.merged.is_some() {
                    diagnostics.record_weight_sum(support.weights());
                }
                scan_all_rejected = scan.all_rejected;
            }
        }

        // Trace and convergence bookkeeping.
        let loglik = mixture_loglik(data, family, &beta, support.points(), support.weights())?;
        trace.push(TracePoint {
            iteration: k,
            loglik,
            m: support.n_points(),
        });
        let dims_stable = support.n_points() == prev_points.len();
        let deltas_small = dims_stable
            && max_point_delta(support.points(), &prev_points) <= config.tol_support
            && max_abs_delta(&beta, &prev_beta) <= config.tol_fixed;
        match config.criterion {
            // Under the confidence rule the parameters count as converged
            // only once a merge scan rejected every pair (vacuous at M = 1).
            CollapseCriterion::ConfidenceLevel(_) => {
                if deltas_small && scan_all_rejected {
                    converged_params = true;
                }
            }
            CollapseCriterion::DistanceThreshold(_) => {
                if deltas_small {
                    converged_params = true;
                }
            }
        }
        prev_points = support.points().to_vec();
        prev_beta = beta.clone();
        k += 1;
    }

    // Final posterior at the last parameters, reported in a canonical order.
    let w = e_step(data, family, &beta, &support)?;
    diagnostics.max_posterior_row_error = diagnostics
        .max_posterior_row_error
        .max(w.max_row_sum_error());
    let (support, order) = support.sorted_by_first_coordinate();
    let w = w.permute_columns(&order);
    let assignments: Vec<usize> = assign_groups(&w).iter().map(|&m| m + 1).collect();
    let (entropy, mean_entropy) = crate::metrics::entropy(&w);

    let mut support_stderr = Vec::with_capacity(support.n_points());
    for m in 0..support.n_points() {
        match crate::inference::support_point_variance(data, family, &w, &beta, &support, m) {
            Ok(cov) => support_stderr.push(
                (0..support.dim())
                    .map(|d| cov.matrix[(d, d)].max(0.0).sqrt())
                    .collect(),
            ),
            Err(err) => {
                log::warn!("standard errors unavailable for support point {m}: {err}");
                support_stderr.push(vec![f64::NAN; support.dim()]);
            }
        }
    }

    let (beta_stderr, beta_p_values) = if config.compute_inference && data.n_fixed() > 0 {
        match crate::inference::fixed_effect_inference(data, config, &w, &support, &beta) {
            Ok(inference) => (Some(inference.stderr), Some(inference.p_values)),
            Err(err) => {
                log::warn!("fixed-effect inference failed: {err}");
                (None, None)
            }
        }
    } else {
        (None, None)
    };

    Ok(FitResult {
        support,
        support_stderr,
        beta,
        beta_stderr,
        beta_p_values,
        weights: w,
        assignments,
        entropy,
        mean_entropy,
        loglik_trace: trace,
        converged_params,
        converged_clusters,
        iterations,
        diagnostics,
    })
}
