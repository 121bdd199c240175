//! Curvature-based variances and fixed-effect tests.
//!
//! Standard errors come from the observed information (negated numerical
//! Hessian) of the relevant weighted log-likelihood block. Fixed-effect
//! p-values are likelihood-ratio tests: each coefficient is dropped in turn
//! and the reduced model is re-estimated at the same number of clusters.

use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::HierarchicalDataset;
use crate::em::{
    self, DiscreteSupport, FitConfig, PosteriorWeights,
};
use crate::error::{Error, Result};
use crate::family::{dot, fixed_linear_part, log_density_at, mixture_loglik, Family};

/// Relative eigenvalue threshold below which an information direction is
/// treated as numerically zero (reduces the rank).
const RANK_TOL: f64 = 1e-12;

/// Convergence tolerance (relative to `max(1, |loglik|)`) and round cap for
/// the reduced refits behind likelihood-ratio tests.
const REFIT_TOL: f64 = 1e-6;
const REFIT_MAX_ROUNDS: usize = 25;

/// A covariance estimate from inverting an observed-information block.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Pseudo-inverse of the information (a covariance matrix).
    pub matrix: DMatrix<f64>,
    /// Numerical rank of the information; directions below tolerance are
    /// excluded from the inverse.
    pub rank: usize,
    /// Whether the information was positive semi-definite (a true local
    /// maximum). Negative directions are excluded and flagged here.
    pub at_maximum: bool,
}

/// Central-difference Hessian of `f` at `x`.
///
/// Steps are `h_d = max(1e-4, 1e-4·|x_d|)` per coordinate; off-diagonal
/// entries use the four-point stencil and the result is symmetrized as
/// `(H + Hᵀ)/2`. Any non-finite stencil value is an error naming the
/// offending coordinate.
pub fn numeric_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let dim = x.len();
    if dim == 0 {
        return Err(Error::Invalid("cannot differentiate over zero dimensions".into()));
    }
    let steps: Vec<f64> = x.iter().map(|&v| (1e-4f64).max(1e-4 * v.abs())).collect();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the expansion point".into(),
        ));
    }
    let mut h = DMatrix::zeros(dim, dim);
    let mut point = x.to_vec();
    for d in 0..dim {
        let hd = steps[d];
        point[d] = x[d] + hd;
        let f_plus = f(&point);
        point[d] = x[d] - hd;
        let f_minus = f(&point);
        point[d] = x[d];
        let second = (f_plus - 2.0 * f0 + f_minus) / (hd * hd);
        if !second.is_finite() {
            return Err(Error::Numerical(format!(
                "second difference is not finite along coordinate {d}"
            )));
        }
        h[(d, d)] = second;
        for e in (d + 1)..dim {
            let he = steps[e];
            let mut eval_at = |sd: f64, se: f64| {
                point[d] = x[d] + sd * hd;
                point[e] = x[e] + se * he;
                let v = f(&point);
                point[d] = x[d];
                point[e] = x[e];
                v
            };
            let fpp = eval_at(1.0, 1.0);
            let fpm = eval_at(1.0, -1.0);
            let fmp = eval_at(-1.0, 1.0);
            let fmm = eval_at(-1.0, -1.0);
            let mixed = (fpp - fpm - fmp + fmm) / (4.0 * hd * he);
            if !mixed.is_finite() {
                return Err(Error::Numerical(format!(
                    "mixed difference is not finite for coordinates ({d}, {e})"
                )));
            }
            h[(d, e)] = mixed;
            h[(e, d)] = mixed;
        }
    }
    // Already symmetric by construction; keep the explicit symmetrization as
    // insurance against future stencil changes.
    Ok((&h + h.transpose()) * 0.5)
}

/// Invert an observed information matrix (`info = −H`) into a covariance.
///
/// Uses the eigendecomposition: directions with eigenvalue below
/// `RANK_TOL·max(λ)` are dropped (rank deficiency), negative directions are
/// dropped and flagged (`at_maximum = false`).
pub fn information_to_covariance(info: &DMatrix<f64>) -> CovarianceEstimate {
    let q = info.nrows();
    let sym = (info + info.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let lambda_max = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = RANK_TOL * lambda_max.max(1.0);
    let mut matrix = DMatrix::zeros(q, q);
    let mut rank = 0usize;
    let mut at_maximum = true;
    for (idx, &lambda) in eigen.eigenvalues.iter().enumerate() {
        if lambda > tol {
            rank += 1;
            let v = eigen.eigenvectors.column(idx);
            matrix += v * v.transpose() / lambda;
        } else if lambda < -tol {
            at_maximum = false;
        }
    }
    CovarianceEstimate {
        matrix,
        rank,
        at_maximum,
    }
}

/// Covariance of support point `m` from the curvature of its posterior-
/// weighted log-likelihood `c ↦ Σ_i W_im ln p(y_i | β, c)` at the current
/// point.
pub fn support_point_variance(
    data: &HierarchicalDataset,
    family: Family,
    w: &PosteriorWeights,
    beta: &[f64],
    support: &DiscreteSupport,
    m: usize,
) -> Result<CovarianceEstimate> {
    if m >= support.n_points() {
        return Err(Error::Invalid(format!(
            "support point {m} out of range for {} points",
            support.n_points()
        )));
    }
    if w.n_clusters() != support.n_points() {
        return Err(Error::Dimension(format!(
            "posterior matrix has {} columns but the support has {} points",
            w.n_clusters(),
            support.n_points()
        )));
    }
    let fixed_part = fixed_linear_part(data, beta);
    let column = w.column(m);
    let objective = |c: &[f64]| {
        let mut total = 0.0;
        for (i, &wi) in column.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let mut group_ll = 0.0;
            for j in data.group_rows(i) {
                group_ll += log_density_at(data, family, j, fixed_part[j] + dot(data.z_row(j), c));
            }
            total += wi * group_ll;
        }
        total
    };
    let hessian = numeric_hessian(&objective, support.point(m))?;
    let estimate = information_to_covariance(&(-hessian));
    if !estimate.at_maximum {
        log::warn!("information for support point {m} has negative curvature directions");
    }
    Ok(estimate)
}

/// Covariance of the fixed coefficients from the curvature of the weighted
/// objective `β ↦ Σ_m Σ_i W_im ln p(y_i | β, c_m)` at the current β.
pub fn fixed_effect_variance(
    data: &HierarchicalDataset,
    family: Family,
    w: &PosteriorWeights,
    beta: &[f64],
    support: &DiscreteSupport,
) -> Result<CovarianceEstimate> {
    if data.n_fixed() == 0 {
        return Err(Error::Invalid("no fixed coefficients to analyze".into()));
    }
    let points = support.points();
    let objective = |b: &[f64]| {
        let fixed_part = fixed_linear_part(data, b);
        let mut total = 0.0;
        for (k, point) in points.iter().enumerate() {
            for i in 0..data.n_groups() {
                let wik = w.get(i, k);
                if wik == 0.0 {
                    continue;
                }
                let mut group_ll = 0.0;
                for j in data.group_rows(i) {
                    group_ll +=
                        log_density_at(data, family, j, fixed_part[j] + dot(data.z_row(j), point));
                }
                total += wik * group_ll;
            }
        }
        total
    };
    let hessian = numeric_hessian(&objective, beta)?;
    Ok(information_to_covariance(&(-hessian)))
}

/// Standard errors and likelihood-ratio p-values for the fixed coefficients.
#[derive(Debug, Clone)]
pub struct FixedEffectInference {
    pub stderr: Vec<f64>,
    /// `None` entries mark reduced fits that did not converge; p-values are
    /// never fabricated.
    pub p_values: Vec<Option<f64>>,
}

/// Fixed-effect inference at a fitted model.
///
/// Standard errors are square roots of the covariance diagonal. For each
/// coefficient `p`, the p-value comes from `2(ℓ_full − ℓ_reduced)` against
/// χ²(1), where the reduced model drops column `p` from the fixed design and
/// is re-estimated at the same cluster count by a short EM restricted to
/// this model (E-step, mass update, inner alternation), started from the
/// full fit.
pub fn fixed_effect_inference(
    data: &HierarchicalDataset,
    config: &FitConfig,
    w: &PosteriorWeights,
    support: &DiscreteSupport,
    beta: &[f64],
) -> Result<FixedEffectInference> {
    let family = config.family;
    let p = data.n_fixed();
    if p == 0 {
        return Ok(FixedEffectInference {
            stderr: Vec::new(),
            p_values: Vec::new(),
        });
    }
    let covariance = fixed_effect_variance(data, family, w, beta, support)?;
    let stderr: Vec<f64> = (0..p)
        .map(|d| covariance.matrix[(d, d)].max(0.0).sqrt())
        .collect();

    let full_loglik =
        mixture_loglik(data, family, beta, support.points(), support.weights())?;
    let chi1 = ChiSquared::new(1.0).expect("χ²(1) is valid");
    let mut p_values = Vec::with_capacity(p);
    for drop in 0..p {
        let reduced_data = data.drop_fixed_column(drop)?;
        let reduced_beta: Vec<f64> = beta
            .iter()
            .enumerate()
            .filter_map(|(d, &v)| (d != drop).then_some(v))
            .collect();
        match refit_reduced(&reduced_data, config, support, &reduced_beta) {
            Ok(Some(reduced_loglik)) => {
                let statistic = (2.0 * (full_loglik - reduced_loglik)).max(0.0);
                p_values.push(Some(1.0 - chi1.cdf(statistic)));
            }
            Ok(None) => {
                log::warn!("reduced fit for coefficient {drop} did not converge; no p-value");
                p_values.push(None);
            }
            Err(err) => {
                log::warn!("reduced fit for coefficient {drop} failed ({err}); no p-value");
                p_values.push(None);
            }
        }
    }
    Ok(FixedEffectInference { stderr, p_values })
}

/// Re-estimate the model on a reduced design at fixed cluster count.
/// Returns the converged mixture log-likelihood, or `None` when the refit
/// did not settle within its round budget.
fn refit_reduced(
    data: &HierarchicalDataset,
    config: &FitConfig,
    support: &DiscreteSupport,
    beta: &[f64],
) -> Result<Option<f64>> {
    let family = config.family;
    let mut support = support.clone();
    let mut beta = beta.to_vec();
    let mut previous =
        mixture_loglik(data, family, &beta, support.points(), support.weights())?;
    for _ in 0..REFIT_MAX_ROUNDS {
        let w = em::e_step(data, family, &beta, &support)?;
        support.set_weights(em::update_weights(&w));
        let inner = em::inner_em(data, family, &w, &support, &beta, config)?;
        support.set_points(inner.points);
        beta = inner.beta;
        let current =
            mixture_loglik(data, family, &beta, support.points(), support.weights())?;
        if (current - previous).abs() <= REFIT_TOL * previous.abs().max(1.0) {
            return Ok(Some(current));
        }
        previous = current;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hessian_of_a_quadratic_is_its_coefficient_matrix() {
        // f(x, y) = -x² - 3y² + 2xy has Hessian [[-2, 2], [2, -6]].
        let f = |v: &[f64]| -v[0] * v[0] - 3.0 * v[1] * v[1] + 2.0 * v[0] * v[1];
        let h = numeric_hessian(&f, &[0.3, -0.8]).unwrap();
        assert_relative_eq!(h[(0, 0)], -2.0, epsilon = 1e-5);
        assert_relative_eq!(h[(1, 1)], -6.0, epsilon = 1e-5);
        assert_relative_eq!(h[(0, 1)], 2.0, epsilon = 1e-5);
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn hessian_of_poisson_loglik_matches_analytic_curvature() {
        // Single observation, η = c: d²/dc² [yc − e^c] = −e^c.
        let y = 3.0;
        let f = |v: &[f64]| y * v[0] - v[0].exp();
        let h = numeric_hessian(&f, &[y.ln()]).unwrap();
        assert_relative_eq!(h[(0, 0)], -y, epsilon = 1e-5);
    }

    #[test]
    fn hessian_rejects_non_finite_stencils() {
        // Step size is 1e-4 here, so the stencil at 0.5 reaches 0.5001.
        let f = |v: &[f64]| if v[0] > 0.5 { f64::NAN } else { -v[0] * v[0] };
        assert!(numeric_hessian(&f, &[0.5]).is_err());
        let g = |_: &[f64]| f64::INFINITY;
        assert!(numeric_hessian(&g, &[0.0]).is_err());
    }

    #[test]
    fn information_inversion_recovers_a_diagonal_covariance() {
        let info = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 0.25]));
        let cov = information_to_covariance(&info);
        assert_eq!(cov.rank, 2);
        assert!(cov.at_maximum);
        assert_relative_eq!(cov.matrix[(0, 0)], 0.25, epsilon = 1e-12);
        assert_relative_eq!(cov.matrix[(1, 1)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(cov.matrix[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_information_uses_the_pseudo_inverse() {
        // Rank-one information: only the (1,1) direction is identified.
        let mut info = DMatrix::zeros(2, 2);
        info[(0, 0)] = 2.0;
        let cov = information_to_covariance(&info);
        assert_eq!(cov.rank, 1);
        assert_relative_eq!(cov.matrix[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(cov.matrix[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_curvature_is_flagged() {
        let info = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.5]));
        let cov = information_to_covariance(&info);
        assert_eq!(cov.rank, 1);
        assert!(!cov.at_maximum);
    }
}
