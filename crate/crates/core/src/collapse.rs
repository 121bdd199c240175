//! Support-point collapse: deciding when two points are indistinguishable
//! and merging them.
//!
//! Two rules are implemented. The distance rule merges the closest pair of
//! support points whenever their Euclidean distance falls below a threshold
//! `t`. The confidence rule builds a `(1−α)` confidence region around each
//! point from the curvature of its weighted likelihood and merges the
//! closest pair whose regions overlap — scalar regions are intervals, higher
//! dimensions use an exact ellipsoid-intersection test based on a
//! generalized eigendecomposition.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use crate::em::DiscreteSupport;
use crate::error::{Error, Result};
use crate::inference::CovarianceEstimate;
use crate::optim::golden_section_min;

/// Slack on the overlap functional: `K(s*) ≥ -K_BOUNDARY_TOL` counts as
/// overlapping, so boundary-touching regions merge.
const K_BOUNDARY_TOL: f64 = 1e-9;

/// Search interval ends for the overlap functional (open unit interval).
const S_INTERVAL_MARGIN: f64 = 1e-9;

/// Golden-section tolerance for the overlap functional.
const S_TOL: f64 = 1e-10;

/// An ellipsoidal confidence region `{x : (x−c)' Σ⁻¹ (x−c) ≤ χ²_df(level)}`.
#[derive(Debug, Clone)]
pub struct ConfidenceRegion {
    pub center: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Coverage level `1 − α`.
    pub level: f64,
    /// Degrees of freedom: the numerical rank of the covariance.
    pub df: usize,
}

impl ConfidenceRegion {
    /// Region at level `1 − alpha` around `center` with the given covariance
    /// estimate.
    pub fn new(center: Vec<f64>, covariance: &CovarianceEstimate, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let q = center.len();
        if covariance.matrix.nrows() != q || covariance.matrix.ncols() != q {
            return Err(Error::Dimension(format!(
                "covariance is {}×{} but the center has {q} coordinates",
                covariance.matrix.nrows(),
                covariance.matrix.ncols()
            )));
        }
        Ok(Self {
            center,
            covariance: covariance.matrix.clone(),
            level: 1.0 - alpha,
            df: covariance.rank,
        })
    }

    /// A region whose covariance has no usable direction (rank zero) cannot
    /// overlap anything.
    pub fn is_degenerate(&self) -> bool {
        self.df == 0 || self.covariance.iter().any(|v| !v.is_finite())
    }
}

/// Euclidean distance matrix between support points (`M × M`, zero diagonal).
pub fn distance_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut d = vec![vec![0.0; m]; m];
    for l in 0..m {
        for h in (l + 1)..m {
            let dist = euclidean(&points[l], &points[h]);
            d[l][h] = dist;
            d[h][l] = dist;
        }
    }
    d
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Two-sided `(1−α)` confidence interval `center ± z_{1−α/2}·√variance`.
///
/// A non-positive variance (a point at a likelihood ridge or boundary)
/// yields a zero-width interval with a warning; such intervals never
/// overlap anything under the strict comparison.
pub fn confidence_interval(center: f64, variance: f64, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if !variance.is_finite() {
        return Err(Error::Numerical(format!(
            "variance {variance} is not finite for a confidence interval"
        )));
    }
    if variance <= 0.0 {
        log::warn!("non-positive variance {variance}: using a zero-width interval at {center}");
        return Ok((center, center));
    }
    let z = standard_normal_quantile(1.0 - alpha / 2.0);
    let half = z * variance.sqrt();
    Ok((center - half, center + half))
}

/// Strict interval overlap: `max(lo_a, lo_b) < min(hi_a, hi_b)`.
pub fn intervals_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0.max(b.0) < a.1.min(b.1)
}

/// Sufficient condition for one region to contain the other: the distance
/// between centers is below the shortest semi-axis of `outer` minus the
/// longest semi-axis of `inner`. Cheap, conservative, and used as a shortcut
/// before the full intersection test.
pub fn containment_sufficient(inner: &ConfidenceRegion, outer: &ConfidenceRegion) -> Result<bool> {
    if inner.center.len() != outer.center.len() {
        return Err(Error::Dimension(
            "confidence regions live in different dimensions".into(),
        ));
    }
    if inner.is_degenerate() || outer.is_degenerate() {
        return Ok(false);
    }
    let d = euclidean(&inner.center, &outer.center);
    let chi_outer = chi_squared_quantile(outer.df, outer.level)?;
    let chi_inner = chi_squared_quantile(inner.df, inner.level)?;
    let outer_min_axis = (chi_outer * min_eigenvalue(&outer.covariance).max(0.0)).sqrt();
    let inner_max_axis = (chi_inner * max_eigenvalue(&inner.covariance).max(0.0)).sqrt();
    Ok(d < outer_min_axis - inner_max_axis)
}

/// Verdict of the exact ellipsoid-intersection test.
#[derive(Debug, Clone)]
pub struct OverlapDecision {
    pub overlap: bool,
    /// Minimized value of the overlap functional `K(s)`.
    pub k_min: f64,
    /// Argmin of `K` on the open unit interval.
    pub s_star: f64,
}

/// Exact overlap test between two ellipsoidal regions.
///
/// Reduces the generalized eigenproblem `Σ_b φ = λ Σ_a φ` by the Cholesky
/// factor of `Σ_a`, transforms the center offset, and minimizes
/// `K(s) = 1 − (1/χ²) Σ_h v_h² s(1−s)/(1 + s(λ_h − 1))` by golden section on
/// the open unit interval. `K(s*) ≥ 0` (within a 1e-9 slack) means the
/// regions intersect.
pub fn ellipsoid_intersection_test(
    a: &ConfidenceRegion,
    b: &ConfidenceRegion,
) -> Result<OverlapDecision> {
    let q = a.center.len();
    if b.center.len() != q {
        return Err(Error::Dimension(
            "confidence regions live in different dimensions".into(),
        ));
    }
    if a.level != b.level {
        return Err(Error::Invalid(format!(
            "confidence regions have different levels ({} vs {})",
            a.level, b.level
        )));
    }
    let df = a.df.min(b.df);
    let chi2 = chi_squared_quantile(df, a.level)?;

    let chol = cholesky_with_ridge(&a.covariance).ok_or_else(|| {
        Error::Numerical("covariance is not positive definite even after ridging".into())
    })?;
    let l = chol.l();
    // B = L⁻¹ Σ_b L⁻ᵀ, symmetrized against rounding.
    let half = l
        .solve_lower_triangular(&b.covariance)
        .ok_or_else(|| Error::Numerical("triangular solve failed in overlap test".into()))?;
    let b_mat = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed in overlap test".into()))?;
    let b_sym = (&b_mat + b_mat.transpose()) * 0.5;
    let eigen = b_sym.symmetric_eigen();
    // Φ = L⁻ᵀ U, so Φᵀ d = Uᵀ L⁻¹ d.
    let d = DVector::from_iterator(q, b.center.iter().zip(&a.center).map(|(bc, ac)| bc - ac));
    let ld = l
        .solve_lower_triangular(&d)
        .ok_or_else(|| Error::Numerical("triangular solve failed in overlap test".into()))?;
    let v = eigen.eigenvectors.transpose() * ld;
    let lambda = &eigen.eigenvalues;

    let k = |s: f64| {
        let mut acc = 0.0;
        for h in 0..q {
            let denom = 1.0 + s * (lambda[h] - 1.0);
            acc += v[h] * v[h] * s * (1.0 - s) / denom;
        }
        1.0 - acc / chi2
    };
    let (s_star, k_min) =
        golden_section_min(k, S_INTERVAL_MARGIN, 1.0 - S_INTERVAL_MARGIN, S_TOL);
    Ok(OverlapDecision {
        overlap: k_min >= -K_BOUNDARY_TOL,
        k_min,
        s_star,
    })
}

/// Do two confidence regions overlap?
///
/// One-dimensional regions reduce to strict interval overlap; otherwise the
/// containment shortcut is tried in both orientations before the exact test.
pub fn regions_overlap(a: &ConfidenceRegion, b: &ConfidenceRegion) -> Result<bool> {
    let q = a.center.len();
    if b.center.len() != q {
        return Err(Error::Dimension(
            "confidence regions live in different dimensions".into(),
        ));
    }
    if a.is_degenerate() || b.is_degenerate() {
        log::debug!("degenerate confidence region: treating the pair as non-overlapping");
        return Ok(false);
    }
    if q == 1 {
        let alpha = 1.0 - a.level;
        let ia = confidence_interval(a.center[0], a.covariance[(0, 0)], alpha)?;
        let ib = confidence_interval(b.center[0], b.covariance[(0, 0)], 1.0 - b.level)?;
        return Ok(intervals_overlap(ia, ib));
    }
    if containment_sufficient(a, b)? || containment_sufficient(b, a)? {
        return Ok(true);
    }
    Ok(ellipsoid_intersection_test(a, b)?.overlap)
}

/// Mass-weighted merge of two support points:
/// `c = (w_a·c_a + w_b·c_b)/(w_a + w_b)` with mass `w_a + w_b`.
pub fn merge_points(c_a: &[f64], w_a: f64, c_b: &[f64], w_b: f64) -> (Vec<f64>, f64) {
    let total = w_a + w_b;
    let merged = c_a
        .iter()
        .zip(c_b)
        .map(|(&xa, &xb)| {
            if total > 0.0 {
                (w_a * xa + w_b * xb) / total
            } else {
                0.5 * (xa + xb) // two zero-mass points: plain midpoint
            }
        })
        .collect();
    (merged, total)
}

/// Record of one merge, for conservation audits.
#[derive(Debug, Clone)]
pub struct MergeEvent {
    pub parent_a: Vec<f64>,
    pub parent_b: Vec<f64>,
    pub child: Vec<f64>,
}

/// Distance-threshold collapse: repeatedly merge the minimum-distance pair
/// while any off-diagonal distance is below `t`, recomputing distances after
/// every merge. Collapses to a single point when `t` exceeds all distances.
pub fn t_collapse(support: &mut DiscreteSupport, t: f64) -> Vec<MergeEvent> {
    let mut events = Vec::new();
    while support.n_points() > 1 {
        let points = support.points();
        let m = points.len();
        let mut best: Option<(usize, usize, f64)> = None;
        for l in 0..m {
            for h in (l + 1)..m {
                let d = euclidean(&points[l], &points[h]);
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((l, h, d));
                }
            }
        }
        let (l, h, d) = best.expect("at least one pair when M > 1");
        if d >= t {
            break;
        }
        let parent_a = points[l].clone();
        let parent_b = points[h].clone();
        let child = support.merge_pair(l, h);
        events.push(MergeEvent {
            parent_a,
            parent_b,
            child,
        });
    }
    events
}

/// Outcome of one confidence-criterion scan.
#[derive(Debug, Clone)]
pub struct AlphaScanOutcome {
    /// Pair (indices into the incoming support) that was merged, if any.
    pub merged: Option<(usize, usize)>,
    /// Every candidate pair was examined and rejected — the scan found no
    /// overlapping regions (vacuously true with fewer than two points).
    pub all_rejected: bool,
    pub events: Vec<MergeEvent>,
}

/// Confidence-criterion collapse: walk candidate pairs by increasing
/// distance and merge the *first* pair whose `(1−α)` regions overlap — at
/// most one merge per call. Pairs whose variances are unavailable are
/// rejected with a warning. Returns which pair merged, or that every pair
/// was rejected.
pub fn alpha_collapse_once(
    support: &mut DiscreteSupport,
    covariances: &[Option<CovarianceEstimate>],
    alpha: f64,
) -> Result<AlphaScanOutcome> {
    check_alpha(alpha)?;
    let m = support.n_points();
    if covariances.len() != m {
        return Err(Error::Dimension(format!(
            "{} covariance estimates for {m} support points",
            covariances.len()
        )));
    }
    if m < 2 {
        return Ok(AlphaScanOutcome {
            merged: None,
            all_rejected: true,
            events: Vec::new(),
        });
    }

    let points = support.points();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(m * (m - 1) / 2);
    for l in 0..m {
        for h in (l + 1)..m {
            pairs.push((l, h, euclidean(&points[l], &points[h])));
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    for &(l, h, _) in &pairs {
        let (Some(cov_l), Some(cov_h)) = (&covariances[l], &covariances[h]) else {
            log::warn!("variance unavailable for pair ({l}, {h}); pair cannot merge");
            continue;
        };
        let region_l = ConfidenceRegion::new(points[l].clone(), cov_l, alpha)?;
        let region_h = ConfidenceRegion::new(points[h].clone(), cov_h, alpha)?;
        let overlap = match regions_overlap(&region_l, &region_h) {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => {
                log::warn!("overlap test failed for pair ({l}, {h}): {msg}; pair cannot merge");
                false
            }
            Err(other) => return Err(other),
        };
        if overlap {
            let parent_a = points[l].clone();
            let parent_b = points[h].clone();
            let child = support.merge_pair(l, h);
            return Ok(AlphaScanOutcome {
                merged: Some((l, h)),
                all_rejected: false,
                events: vec![MergeEvent {
                    parent_a,
                    parent_b,
                    child,
                }],
            });
        }
    }
    Ok(AlphaScanOutcome {
        merged: None,
        all_rejected: true,
        events: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!(
            "confidence level alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

pub(crate) fn standard_normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal parameters are valid")
        .inverse_cdf(p)
}

/// Quantile of the chi-squared distribution. The generic inverse CDF is a
/// coarse bisection, so its result is polished with Newton steps on the
/// exact CDF down to machine precision.
pub(crate) fn chi_squared_quantile(df: usize, level: f64) -> Result<f64> {
    if df == 0 {
        return Err(Error::Invalid(
            "chi-squared quantile needs at least one degree of freedom".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!(
            "chi-squared quantile needs a level in (0, 1), got {level}"
        )));
    }
    if df == 2 {
        // Exponential(1/2): closed form.
        return Ok(-2.0 * (1.0 - level).ln());
    }
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| Error::Invalid(format!("chi-squared({df}): {e}")))?;
    let mut x = dist.inverse_cdf(level).max(f64::MIN_POSITIVE);
    for _ in 0..40 {
        let density = dist.pdf(x);
        if density <= 0.0 {
            break;
        }
        let step = (dist.cdf(x) - level) / density;
        let next = (x - step).max(x * 0.5);
        if (next - x).abs() <= 1e-14 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Cholesky with an escalating diagonal ridge, starting at
/// `1e-10·trace/Q`, for covariances that are only numerically indefinite.
fn cholesky_with_ridge(cov: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Some(ch);
    }
    let q = cov.nrows();
    let trace = cov.trace();
    let mut ridge = if trace > 0.0 {
        1e-10 * trace / q as f64
    } else {
        1e-12
    };
    for _ in 0..6 {
        let mut ridged = cov.clone();
        for d in 0..q {
            ridged[(d, d)] += ridge;
        }
        if let Some(ch) = Cholesky::new(ridged) {
            log::debug!("covariance required a diagonal ridge of {ridge}");
            return Some(ch);
        }
        ridge *= 10.0;
    }
    None
}

fn min_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(mat)
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn max_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(mat)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn symmetric_eigenvalues(mat: &DMatrix<f64>) -> Vec<f64> {
    let sym = (mat + mat.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn estimate(matrix: DMatrix<f64>, rank: usize) -> CovarianceEstimate {
        CovarianceEstimate {
            matrix,
            rank,
            at_maximum: true,
        }
    }

    fn scalar_region(center: f64, variance: f64, alpha: f64) -> ConfidenceRegion {
        ConfidenceRegion::new(
            vec![center],
            &estimate(DMatrix::from_element(1, 1, variance), 1),
            alpha,
        )
        .unwrap()
    }

    fn disc_region(center: [f64; 2], variance: f64, alpha: f64) -> ConfidenceRegion {
        ConfidenceRegion::new(
            center.to_vec(),
            &estimate(DMatrix::from_diagonal_element(2, 2, variance), 2),
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn distance_matrix_matches_hand_values() {
        let d = distance_matrix(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 1.0]]);
        assert_relative_eq!(d[0][1], 5.0, max_relative = 1e-15);
        assert_relative_eq!(d[1][0], 5.0, max_relative = 1e-15);
        assert_relative_eq!(d[0][2], 1.0, max_relative = 1e-15);
        assert_eq!(d[1][1], 0.0);
    }

    #[test]
    fn confidence_interval_uses_the_normal_quantile() {
        let (lo, hi) = confidence_interval(0.0, 1.0, 0.05).unwrap();
        assert_relative_eq!(hi, 1.959963984540054, max_relative = 1e-9);
        assert_relative_eq!(lo, -hi, max_relative = 1e-12);
        let (lo, hi) = confidence_interval(2.5, 0.04, 0.10).unwrap();
        assert_relative_eq!(lo, 2.5 - 1.6448536269514722 * 0.2, max_relative = 1e-9);
        assert_relative_eq!(hi, 2.5 + 1.6448536269514722 * 0.2, max_relative = 1e-9);
    }

    #[test]
    fn nonpositive_variance_gives_zero_width() {
        assert_eq!(confidence_interval(1.5, 0.0, 0.05).unwrap(), (1.5, 1.5));
        assert_eq!(confidence_interval(1.5, -0.3, 0.05).unwrap(), (1.5, 1.5));
        assert!(confidence_interval(0.0, f64::NAN, 0.05).is_err());
        assert!(confidence_interval(0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn interval_overlap_is_strict() {
        assert!(intervals_overlap((0.0, 1.0), (0.5, 2.0)));
        assert!(!intervals_overlap((0.0, 1.0), (1.0, 2.0))); // touching
        assert!(!intervals_overlap((0.0, 1.0), (2.0, 3.0)));
        assert!(intervals_overlap((0.0, 10.0), (2.0, 3.0))); // nesting
        // Zero-width intervals never overlap, even inside another interval.
        assert!(!intervals_overlap((0.0, 1.0), (0.5, 0.5)));
    }

    #[test]
    fn unit_disc_regions_overlap_iff_centers_are_close() {
        // χ²₂(0.95) = 5.9915, radius 2.4477: discs 6 apart stay separate,
        // discs 4 apart intersect.
        let a = disc_region([0.0, 0.0], 1.0, 0.05);
        let far = disc_region([6.0, 0.0], 1.0, 0.05);
        let near = disc_region([4.0, 0.0], 1.0, 0.05);
        let d_far = ellipsoid_intersection_test(&a, &far).unwrap();
        assert!(!d_far.overlap, "K(s*) = {}", d_far.k_min);
        let d_near = ellipsoid_intersection_test(&a, &near).unwrap();
        assert!(d_near.overlap, "K(s*) = {}", d_near.k_min);
        assert!(!regions_overlap(&a, &far).unwrap());
        assert!(regions_overlap(&a, &near).unwrap());
    }

    #[test]
    fn chi_squared_radius_matches_reference_value() {
        let chi2 = chi_squared_quantile(2, 0.95).unwrap();
        assert_relative_eq!(chi2, 5.991464547107979, max_relative = 1e-9);
        assert_relative_eq!(chi2.sqrt(), 2.447746830680933, max_relative = 1e-9);
    }

    #[test]
    fn touching_discs_count_as_overlapping() {
        // Centers exactly 2·radius apart: boundary contact, K(s*) ≈ 0.
        let r = 5.991464547107979f64.sqrt();
        let a = disc_region([0.0, 0.0], 1.0, 0.05);
        let b = disc_region([2.0 * r, 0.0], 1.0, 0.05);
        let d = ellipsoid_intersection_test(&a, &b).unwrap();
        assert!(d.k_min.abs() < 1e-6, "K(s*) = {}", d.k_min);
        assert!(d.overlap);
    }

    #[test]
    fn containment_shortcut_detects_nested_regions() {
        let small = disc_region([0.1, 0.0], 0.01, 0.05);
        let large = disc_region([0.0, 0.0], 4.0, 0.05);
        assert!(containment_sufficient(&small, &large).unwrap());
        assert!(!containment_sufficient(&large, &small).unwrap());
        assert!(regions_overlap(&small, &large).unwrap());
    }

    #[test]
    fn scalar_regions_reduce_to_interval_overlap() {
        // Same inputs through regions_overlap and through plain intervals.
        let cases = [
            (0.0, 0.04, 1.0, 0.04, 0.05),
            (0.0, 0.04, 0.5, 0.01, 0.05),
            (-2.0, 0.25, 2.0, 0.25, 0.01),
            (0.0, 1.0, 0.1, 4.0, 0.10),
        ];
        for &(ca, va, cb, vb, alpha) in &cases {
            let ra = scalar_region(ca, va, alpha);
            let rb = scalar_region(cb, vb, alpha);
            let ia = confidence_interval(ca, va, alpha).unwrap();
            let ib = confidence_interval(cb, vb, alpha).unwrap();
            assert_eq!(
                regions_overlap(&ra, &rb).unwrap(),
                intervals_overlap(ia, ib),
                "case {ca} {va} {cb} {vb} {alpha}"
            );
        }
    }

    #[test]
    fn merge_points_is_the_weighted_mean() {
        let (c, w) = merge_points(&[1.0], 0.25, &[3.0], 0.75);
        assert_relative_eq!(c[0], 2.5, max_relative = 1e-15);
        assert_relative_eq!(w, 1.0, max_relative = 1e-15);
        let (c, w) = merge_points(&[1.0, -2.0], 0.5, &[3.0, 6.0], 0.5);
        assert_eq!(c, vec![2.0, 2.0]);
        assert_relative_eq!(w, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn t_collapse_merges_only_pairs_below_threshold() {
        let third = 1.0 / 3.0;
        let mut support = DiscreteSupport::new(
            vec![vec![0.0], vec![0.1], vec![5.0]],
            vec![third, third, third],
        )
        .unwrap();
        let events = t_collapse(&mut support, 0.5);
        assert_eq!(events.len(), 1);
        assert_eq!(support.n_points(), 2);
        assert_relative_eq!(support.point(0)[0], 0.05, max_relative = 1e-12);
        assert_relative_eq!(support.point(1)[0], 5.0, max_relative = 1e-15);
        assert_relative_eq!(support.weight(0), 2.0 * third, max_relative = 1e-12);
        assert_relative_eq!(support.weight(1), third, max_relative = 1e-15);
    }

    #[test]
    fn t_collapse_with_huge_threshold_leaves_one_point() {
        let mut support = DiscreteSupport::new(
            vec![vec![0.0], vec![1.0], vec![10.0]],
            vec![0.25, 0.25, 0.5],
        )
        .unwrap();
        let events = t_collapse(&mut support, 1e6);
        assert_eq!(events.len(), 2);
        assert_eq!(support.n_points(), 1);
        assert_relative_eq!(support.weight(0), 1.0, max_relative = 1e-12);
        // Total mass-weighted mean is preserved through pairwise merging.
        assert_relative_eq!(support.point(0)[0], 0.25 * 1.0 + 0.5 * 10.0, max_relative = 1e-12);
    }

    #[test]
    fn t_collapse_below_all_distances_is_a_noop() {
        let mut support =
            DiscreteSupport::new(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5]).unwrap();
        let events = t_collapse(&mut support, 0.5);
        assert!(events.is_empty());
        assert_eq!(support.n_points(), 2);
    }

    #[test]
    fn alpha_scan_merges_the_closest_overlapping_pair_only() {
        // Pair (0,1) is closest but too tight to overlap; pair (1,2) is the
        // first overlapping pair in the distance ordering and must merge.
        let third = 1.0 / 3.0;
        let mut support = DiscreteSupport::new(
            vec![vec![0.0], vec![1.0], vec![2.5]],
            vec![third, third, third],
        )
        .unwrap();
        let covs = vec![
            Some(estimate(DMatrix::from_element(1, 1, 0.01), 1)),
            Some(estimate(DMatrix::from_element(1, 1, 0.01), 1)),
            Some(estimate(DMatrix::from_element(1, 1, 4.0), 1)),
        ];
        let out = alpha_collapse_once(&mut support, &covs, 0.05).unwrap();
        assert_eq!(out.merged, Some((1, 2)));
        assert!(!out.all_rejected);
        assert_eq!(support.n_points(), 2);
        assert_relative_eq!(support.point(0)[0], 0.0, max_relative = 1e-15);
        assert_relative_eq!(support.point(1)[0], 1.75, max_relative = 1e-12);
        assert_relative_eq!(support.weight(1), 2.0 * third, max_relative = 1e-12);
    }

    #[test]
    fn alpha_scan_reports_all_rejected_when_nothing_overlaps() {
        let mut support = DiscreteSupport::new(
            vec![vec![0.0], vec![10.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let covs = vec![
            Some(estimate(DMatrix::from_element(1, 1, 0.01), 1)),
            Some(estimate(DMatrix::from_element(1, 1, 0.01), 1)),
        ];
        let out = alpha_collapse_once(&mut support, &covs, 0.05).unwrap();
        assert_eq!(out.merged, None);
        assert!(out.all_rejected);
        assert_eq!(support.n_points(), 2);
    }

    #[test]
    fn alpha_scan_with_single_point_is_vacuously_rejected() {
        let mut support = DiscreteSupport::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let out = alpha_collapse_once(&mut support, &[None], 0.05).unwrap();
        assert!(out.all_rejected);
        assert!(out.merged.is_none());
    }

    #[test]
    fn alpha_scan_skips_points_without_variances() {
        let mut support = DiscreteSupport::new(
            vec![vec![0.0], vec![0.1]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let covs = vec![Some(estimate(DMatrix::from_element(1, 1, 0.04), 1)), None];
        let out = alpha_collapse_once(&mut support, &covs, 0.05).unwrap();
        assert!(out.merged.is_none());
        assert!(out.all_rejected);
    }

    #[test]
    fn degenerate_regions_never_overlap() {
        let a = ConfidenceRegion::new(
            vec![0.0, 0.0],
            &estimate(DMatrix::zeros(2, 2), 0),
            0.05,
        )
        .unwrap();
        let b = disc_region([0.0, 0.0], 1.0, 0.05);
        assert!(a.is_degenerate());
        assert!(!regions_overlap(&a, &b).unwrap());
    }

    #[test]
    fn elongated_ellipses_overlap_along_their_long_axis() {
        // Covariances stretched along x: centers 4 apart along x overlap
        // (semi-axis ≈ 2.45·2 = 4.9), but 4 apart along y do not
        // (semi-axis ≈ 2.45·0.5).
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.25]));
        let a = ConfidenceRegion::new(vec![0.0, 0.0], &estimate(cov.clone(), 2), 0.05).unwrap();
        let bx = ConfidenceRegion::new(vec![4.0, 0.0], &estimate(cov.clone(), 2), 0.05).unwrap();
        let by = ConfidenceRegion::new(vec![0.0, 4.0], &estimate(cov, 2), 0.05).unwrap();
        assert!(regions_overlap(&a, &bx).unwrap());
        assert!(!regions_overlap(&a, &by).unwrap());
    }
}
