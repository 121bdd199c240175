//! Response families, canonical links, and log-likelihood evaluation.
//!
//! Both supported families use their canonical link: log for Poisson counts,
//! logit for Bernoulli outcomes. All evaluation happens on the log scale with
//! overflow-safe primitives so that extreme linear predictors degrade
//! gracefully instead of producing `inf`/`NaN`.

use crate::data::HierarchicalDataset;
use crate::error::{Error, Result};

/// Largest linear predictor fed to `exp` when computing a Poisson mean.
///
/// `exp(700)` is still finite in `f64`; anything larger is clamped so the
/// log-likelihood stays finite (hugely negative) rather than `-inf`.
const POISSON_ETA_CLAMP: f64 = 700.0;

/// Response distribution of the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Counts with log link.
    Poisson,
    /// Binary outcomes with logit link.
    Bernoulli,
}

impl Family {
    /// Log-density of a single observation given its linear predictor.
    ///
    /// Poisson: `y·η − exp(η) − ln(y!)`. Bernoulli: `y·η − ln(1 + exp(η))`,
    /// evaluated through [`log1pexp`] so large `|η|` cannot overflow.
    ///
    /// `y` must already be valid for the family (see
    /// [`HierarchicalDataset::validate_for`]); Bernoulli responses outside
    /// `{0, 1}` are a caller bug.
    pub fn log_density(self, y: u64, eta: f64) -> f64 {
        match self {
            Family::Poisson => {
                let ln_fact = statrs::function::gamma::ln_gamma(y as f64 + 1.0);
                log_density_count(y, eta, ln_fact)
            }
            Family::Bernoulli => {
                debug_assert!(y <= 1, "Bernoulli response must be 0 or 1, got {y}");
                log_density_binary(y, eta)
            }
        }
    }

    /// Mean response for a linear predictor: `exp` (clamped) or inverse logit.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Poisson => clamped_exp(eta),
            Family::Bernoulli => sigmoid(eta),
        }
    }

    /// Human-readable family name as used by configs and reports.
    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
        }
    }
}

/// Poisson log-density with the `ln(y!)` term supplied by the caller (the
/// dataset caches it per observation, so hot loops never recompute it).
#[inline]
pub(crate) fn log_density_count(y: u64, eta: f64, ln_factorial: f64) -> f64 {
    y as f64 * eta - clamped_exp(eta) - ln_factorial
}

/// Bernoulli log-density in the numerically symmetric form
/// `-log1pexp(-η)` for successes and `-log1pexp(η)` for failures.
#[inline]
pub(crate) fn log_density_binary(y: u64, eta: f64) -> f64 {
    if y == 1 {
        -log1pexp(-eta)
    } else {
        -log1pexp(eta)
    }
}

/// `exp(η)` with the exponent clamped to ±700 so the result stays finite.
#[inline]
fn clamped_exp(eta: f64) -> f64 {
    if eta.abs() > POISSON_ETA_CLAMP {
        log::debug!("clamping linear predictor {eta} to ±{POISSON_ETA_CLAMP} before exp");
        eta.clamp(-POISSON_ETA_CLAMP, POISSON_ETA_CLAMP).exp()
    } else {
        eta.exp()
    }
}

/// `ln(1 + exp(x))` without overflow for large `x` or cancellation for small.
#[inline]
pub fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Standard logistic function `1 / (1 + exp(-x))`, stable on both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear predictor `x'β + z'c` for one observation.
///
/// Returns a dimension error when the coefficient vectors do not match the
/// covariate vectors.
pub fn linear_predictor(x: &[f64], beta: &[f64], z: &[f64], point: &[f64]) -> Result<f64> {
    if x.len() != beta.len() {
        return Err(Error::Dimension(format!(
            "fixed covariates have length {} but beta has length {}",
            x.len(),
            beta.len()
        )));
    }
    if z.len() != point.len() {
        return Err(Error::Dimension(format!(
            "random covariates have length {} but the support point has length {}",
            z.len(),
            point.len()
        )));
    }
    Ok(dot(x, beta) + dot(z, point))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(ai, bi)| ai * bi).sum()
}

/// Joint log-density of every observation in group `i` under support point
/// `point`: the sum of per-observation log-densities (conditional
/// independence within a group).
pub fn group_log_density(
    data: &HierarchicalDataset,
    family: Family,
    group: usize,
    beta: &[f64],
    point: &[f64],
) -> Result<f64> {
    check_param_shapes(data, beta, point)?;
    if group >= data.n_groups() {
        return Err(Error::Invalid(format!(
            "group index {group} out of range for {} groups",
            data.n_groups()
        )));
    }
    let mut total = 0.0;
    for j in data.group_rows(group) {
        let eta = dot(data.x_row(j), beta) + dot(data.z_row(j), point);
        total += log_density_at(data, family, j, eta);
    }
    Ok(total)
}

/// `N × M` matrix of group log-densities `ℓ_im = ln p(y_i | β, c_m)`,
/// flattened row-major. This is the shared building block for the E-step and
/// both likelihood summaries.
pub fn group_loglik_matrix(
    data: &HierarchicalDataset,
    family: Family,
    beta: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_param_shapes(data, beta, points.first().map_or(&[], |p| p.as_slice()))?;
    let n = data.n_groups();
    let m = points.len();
    let fixed_part = fixed_linear_part(data, beta);
    let mut out = vec![0.0; n * m];
    for (k, point) in points.iter().enumerate() {
        if point.len() != data.n_random() {
            return Err(Error::Dimension(format!(
                "support point {k} has length {} but the data has {} random covariates",
                point.len(),
                data.n_random()
            )));
        }
        for i in 0..n {
            let mut total = 0.0;
            for j in data.group_rows(i) {
                let eta = fixed_part[j] + dot(data.z_row(j), point);
                total += log_density_at(data, family, j, eta);
            }
            out[i * m + k] = total;
        }
    }
    Ok(out)
}

/// Weighted log-likelihood `Σ_m ω_m Σ_i ln p(y_i | β, c_m)` — the objective
/// the M-step maximizes.
pub fn marginal_loglik(
    data: &HierarchicalDataset,
    family: Family,
    beta: &[f64],
    points: &[Vec<f64>],
    weights: &[f64],
) -> Result<f64> {
    check_mixture_shapes(points, weights)?;
    let ll = group_loglik_matrix(data, family, beta, points)?;
    let m = points.len();
    let mut total = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let column_sum: f64 = (0..data.n_groups()).map(|i| ll[i * m + k]).sum();
        total += w * column_sum;
    }
    Ok(total)
}

/// True mixture log-likelihood `Σ_i ln Σ_m ω_m p(y_i | β, c_m)`, evaluated
/// through log-sum-exp. This is the quantity the EM iterations cannot
/// decrease, and the one reported in likelihood traces and ratio tests.
pub fn mixture_loglik(
    data: &HierarchicalDataset,
    family: Family,
    beta: &[f64],
    points: &[Vec<f64>],
    weights: &[f64],
) -> Result<f64> {
    check_mixture_shapes(points, weights)?;
    let ll = group_loglik_matrix(data, family, beta, points)?;
    mixture_loglik_from_matrix(data, &ll, weights)
}

/// Mixture log-likelihood from a precomputed `N × M` group log-density
/// matrix (see [`group_loglik_matrix`]), avoiding a second density pass when
/// the matrix is also needed for an E-step.
pub(crate) fn mixture_loglik_from_matrix(
    data: &HierarchicalDataset,
    ll: &[f64],
    weights: &[f64],
) -> Result<f64> {
    let m = weights.len();
    let mut total = 0.0;
    for i in 0..data.n_groups() {
        let row: Vec<f64> = (0..m)
            .map(|k| {
                if weights[k] > 0.0 {
                    weights[k].ln() + ll[i * m + k]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let lse = log_sum_exp(&row);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!(
                "mixture likelihood underflowed for group {name}",
                name = data.group_label(i)
            )));
        }
        total += lse;
    }
    Ok(total)
}

/// Fitted means `μ̂_ij` with each group evaluated at its assigned support
/// point (`assignment[i]` is a 0-based index into `points`).
pub fn fitted_means(
    data: &HierarchicalDataset,
    family: Family,
    beta: &[f64],
    points: &[Vec<f64>],
    assignment: &[usize],
) -> Result<Vec<f64>> {
    check_param_shapes(data, beta, points.first().map_or(&[], |p| p.as_slice()))?;
    if assignment.len() != data.n_groups() {
        return Err(Error::Dimension(format!(
            "assignment has length {} but the data has {} groups",
            assignment.len(),
            data.n_groups()
        )));
    }
    let fixed_part = fixed_linear_part(data, beta);
    let mut mu = vec![0.0; data.n_obs()];
    for (i, &assigned) in assignment.iter().enumerate() {
        let point = points.get(assigned).ok_or_else(|| {
            Error::Invalid(format!(
                "group {name} assigned to cluster {assigned} but only {m} clusters exist",
                name = data.group_label(i),
                m = points.len()
            ))
        })?;
        for j in data.group_rows(i) {
            let eta = fixed_part[j] + dot(data.z_row(j), point);
            mu[j] = family.inverse_link(eta);
        }
    }
    Ok(mu)
}

/// `ln Σ exp(v_h)` with the usual max-shift; `-inf` entries are skipped.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max; // all -inf (empty mixtures) or a NaN propagates below
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-observation fixed contribution `x'β`, hoisted out of inner loops.
pub(crate) fn fixed_linear_part(data: &HierarchicalDataset, beta: &[f64]) -> Vec<f64> {
    (0..data.n_obs()).map(|j| dot(data.x_row(j), beta)).collect()
}

#[inline]
pub(crate) fn log_density_at(
    data: &HierarchicalDataset,
    family: Family,
    j: usize,
    eta: f64,
) -> f64 {
    match family {
        Family::Poisson => log_density_count(data.response(j), eta, data.ln_factorial(j)),
        Family::Bernoulli => log_density_binary(data.response(j), eta),
    }
}

fn check_param_shapes(data: &HierarchicalDataset, beta: &[f64], point: &[f64]) -> Result<()> {
    if beta.len() != data.n_fixed() {
        return Err(Error::Dimension(format!(
            "beta has length {} but the data has {} fixed covariates",
            beta.len(),
            data.n_fixed()
        )));
    }
    if point.len() != data.n_random() {
        return Err(Error::Dimension(format!(
            "support point has length {} but the data has {} random covariates",
            point.len(),
            data.n_random()
        )));
    }
    Ok(())
}

fn check_mixture_shapes(points: &[Vec<f64>], weights: &[f64]) -> Result<()> {
    if points.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} support points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::Invalid("mixture must have at least one support point".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HierarchicalDataset;
    use approx::assert_relative_eq;

    fn toy_dataset() -> HierarchicalDataset {
        // Two groups, three observations, one fixed and one (constant) random covariate.
        let groups = vec!["a".into(), "a".into(), "b".into()];
        let y = vec![1, 0, 2];
        let x = vec![0.5, -1.0, 2.0];
        let z = vec![1.0, 1.0, 1.0];
        HierarchicalDataset::from_long(&groups, &y, &x, &z, 1, 1).unwrap()
    }

    #[test]
    fn bernoulli_log_density_matches_closed_forms() {
        // ln p(1 | η=0) = ln(1/2)
        assert_relative_eq!(
            Family::Bernoulli.log_density(1, 0.0),
            -std::f64::consts::LN_2,
            max_relative = 1e-15
        );
        // Saturated success: -ln(1 + e^{-50}) ≈ -e^{-50}
        assert_relative_eq!(
            Family::Bernoulli.log_density(1, 50.0),
            -1.928749847963918e-22,
            max_relative = 1e-9
        );
        // Symmetry between success and failure
        assert_relative_eq!(
            Family::Bernoulli.log_density(0, -3.2),
            Family::Bernoulli.log_density(1, 3.2),
            max_relative = 1e-15
        );
    }

    #[test]
    fn poisson_log_density_matches_closed_forms() {
        // ln p(0 | η=0) = -exp(0) = -1
        assert_relative_eq!(Family::Poisson.log_density(0, 0.0), -1.0, max_relative = 1e-15);
        // Generic value against the direct formula with ln(y!) = ln 6
        let direct = 3.0 * 0.7 - 0.7f64.exp() - 6.0f64.ln();
        assert_relative_eq!(Family::Poisson.log_density(3, 0.7), direct, max_relative = 1e-14);
    }

    #[test]
    fn poisson_log_density_stays_finite_at_extreme_eta() {
        let v = Family::Poisson.log_density(2, 5000.0);
        assert!(v.is_finite());
        let w = Family::Poisson.log_density(2, -5000.0);
        assert!(w.is_finite());
    }

    #[test]
    fn inverse_link_hits_known_values() {
        assert_relative_eq!(Family::Poisson.inverse_link(2.5), 12.182493960703473, max_relative = 1e-14);
        assert_relative_eq!(Family::Poisson.inverse_link(-1.0), 0.36787944117144233, max_relative = 1e-14);
        // logit(0.9) = ln 9 = 2.1972246…; the rounded η=2.1972 must land within 1e-4 of 0.9.
        assert!((Family::Bernoulli.inverse_link(2.1972) - 0.9).abs() < 1e-4);
        assert_relative_eq!(Family::Bernoulli.inverse_link(-10.0), 4.5397868702434395e-5, max_relative = 1e-10);
        assert_relative_eq!(Family::Bernoulli.inverse_link(10.0), 0.9999546021312976, max_relative = 1e-12);
        // Saturation without NaN at the extremes
        assert_eq!(Family::Bernoulli.inverse_link(800.0), 1.0);
        assert_eq!(Family::Bernoulli.inverse_link(-800.0), 0.0);
        assert!(Family::Poisson.inverse_link(800.0).is_finite());
    }

    #[test]
    fn log1pexp_agrees_with_naive_form_in_safe_range() {
        for &x in &[-30.0, -2.0, -1e-8, 0.0, 1e-8, 2.0, 30.0] {
            assert_relative_eq!(log1pexp(x), (1.0 + f64::exp(x)).ln(), max_relative = 1e-12);
        }
        // Large arguments approach the identity
        assert_relative_eq!(log1pexp(750.0), 750.0, max_relative = 1e-15);
    }

    #[test]
    fn linear_predictor_is_the_sum_of_dot_products() {
        let eta = linear_predictor(&[1.0, 2.0], &[0.5, -1.0], &[3.0], &[0.25]).unwrap();
        assert_relative_eq!(eta, 0.5 - 2.0 + 0.75, max_relative = 1e-15);
        // Empty fixed part: pure random-effects predictor
        let eta = linear_predictor(&[], &[], &[1.0], &[2.0]).unwrap();
        assert_relative_eq!(eta, 2.0, max_relative = 1e-15);
        assert!(linear_predictor(&[1.0], &[1.0, 2.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn group_log_density_is_additive_over_observations() {
        let data = toy_dataset();
        let beta = [0.3];
        let point = [0.8];
        let by_hand: f64 = (0..2)
            .map(|j| {
                let eta = data.x_row(j)[0] * beta[0] + point[0];
                Family::Poisson.log_density(data.response(j), eta)
            })
            .sum();
        let got = group_log_density(&data, Family::Poisson, 0, &beta, &point).unwrap();
        assert_relative_eq!(got, by_hand, max_relative = 1e-14);
    }

    #[test]
    fn group_log_density_is_invariant_to_observation_order() {
        let groups = vec!["g".into(); 3];
        let y = vec![4, 0, 2];
        let x = vec![1.0, -0.5, 0.25];
        let z = vec![1.0, 1.0, 1.0];
        let fwd = HierarchicalDataset::from_long(&groups, &y, &x, &z, 1, 1).unwrap();
        let rev = HierarchicalDataset::from_long(
            &groups,
            &[2, 0, 4],
            &[0.25, -0.5, 1.0],
            &z,
            1,
            1,
        )
        .unwrap();
        let a = group_log_density(&fwd, Family::Poisson, 0, &[0.4], &[0.1]).unwrap();
        let b = group_log_density(&rev, Family::Poisson, 0, &[0.4], &[0.1]).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-15);
    }

    #[test]
    fn marginal_loglik_reduces_to_plain_loglik_for_single_component() {
        let data = toy_dataset();
        let beta = [0.1];
        let points = vec![vec![0.5]];
        let got = marginal_loglik(&data, Family::Poisson, &beta, &points, &[1.0]).unwrap();
        let direct: f64 = (0..2)
            .map(|i| group_log_density(&data, Family::Poisson, i, &beta, &points[0]).unwrap())
            .sum();
        assert_relative_eq!(got, direct, max_relative = 1e-14);
    }

    #[test]
    fn mixture_loglik_matches_triple_loop_oracle() {
        let data = toy_dataset();
        let beta = [0.2];
        let points = vec![vec![-0.5], vec![0.7], vec![1.4]];
        let weights = [0.2, 0.5, 0.3];
        let got = mixture_loglik(&data, Family::Poisson, &beta, &points, &weights).unwrap();
        // Oracle: direct densities without any log-space shifts.
        let mut expect = 0.0;
        for i in 0..data.n_groups() {
            let mut acc = 0.0;
            for (point, &w) in points.iter().zip(&weights) {
                let mut ll = 0.0;
                for j in data.group_rows(i) {
                    let eta = data.x_row(j)[0] * beta[0] + point[0];
                    ll += Family::Poisson.log_density(data.response(j), eta);
                }
                acc += w * ll.exp();
            }
            expect += acc.ln();
        }
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn mixture_loglik_with_duplicate_points_collapses_to_one_component() {
        let data = toy_dataset();
        let beta = [0.2];
        let dup = mixture_loglik(
            &data,
            Family::Poisson,
            &beta,
            &[vec![0.6], vec![0.6]],
            &[0.4, 0.6],
        )
        .unwrap();
        let single =
            mixture_loglik(&data, Family::Poisson, &beta, &[vec![0.6]], &[1.0]).unwrap();
        assert_relative_eq!(dup, single, max_relative = 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_extreme_shifts() {
        let v = [-1000.0, -1000.5];
        let direct = (-1000.0f64).exp() + (-1000.5f64).exp(); // underflows to 0
        assert_eq!(direct, 0.0);
        let got = log_sum_exp(&v);
        let expect = -1000.0 + (1.0 + (-0.5f64).exp()).ln();
        assert_relative_eq!(got, expect, max_relative = 1e-14);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn fitted_means_use_the_assigned_cluster() {
        let data = toy_dataset();
        let mu = fitted_means(
            &data,
            Family::Poisson,
            &[0.0],
            &[vec![0.0], vec![1.0]],
            &[0, 1],
        )
        .unwrap();
        assert_relative_eq!(mu[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(mu[2], std::f64::consts::E, max_relative = 1e-14);
    }
}
