//! End-to-end behavior of the full fitting loop on small constructed
//! datasets with known cluster structure.

use spglmm::em::{fit, CollapseCriterion, FitConfig};
use spglmm::{Family, HierarchicalDataset};

/// Four groups with two clearly separated Poisson intensity levels: counts
/// near exp(2.5) ≈ 12 for A and B, near exp(−0.8) ≈ 0.45 for C and D, plus a
/// mildly informative slope covariate and a constant random design.
fn toy_poisson() -> HierarchicalDataset {
    let rows: [(&str, u64, f64); 24] = [
        ("A", 13, 0.2),
        ("A", 11, -0.4),
        ("A", 12, 0.0),
        ("A", 15, 0.9),
        ("A", 10, -0.8),
        ("A", 14, 0.5),
        ("B", 12, 0.1),
        ("B", 13, 0.3),
        ("B", 11, -0.2),
        ("B", 16, 1.1),
        ("B", 12, -0.1),
        ("B", 13, 0.4),
        ("C", 0, 0.2),
        ("C", 1, 0.8),
        ("C", 0, -0.3),
        ("C", 1, 1.2),
        ("C", 0, 0.1),
        ("C", 0, -0.6),
        ("D", 1, 0.5),
        ("D", 0, -0.2),
        ("D", 0, 0.3),
        ("D", 2, 1.4),
        ("D", 0, -0.9),
        ("D", 1, 0.7),
    ];
    let group: Vec<String> = rows.iter().map(|r| r.0.to_string()).collect();
    let y: Vec<u64> = rows.iter().map(|r| r.1).collect();
    let x: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let z = vec![1.0; rows.len()];
    HierarchicalDataset::from_long(&group, &y, &x, &z, 1, 1).expect("toy dataset is valid")
}

/// Four groups of binary outcomes with two propensity levels and no fixed
/// effects: A and B are mostly ones, C and D mostly zeros.
fn toy_bernoulli() -> HierarchicalDataset {
    let rows: [(&str, u64); 32] = [
        ("A", 1),
        ("A", 1),
        ("A", 1),
        ("A", 1),
        ("A", 1),
        ("A", 1),
        ("A", 1),
        ("A", 0),
        ("B", 1),
        ("B", 1),
        ("B", 1),
        ("B", 1),
        ("B", 1),
        ("B", 0),
        ("B", 1),
        ("B", 1),
        ("C", 0),
        ("C", 0),
        ("C", 1),
        ("C", 0),
        ("C", 0),
        ("C", 0),
        ("C", 0),
        ("C", 0),
        ("D", 0),
        ("D", 0),
        ("D", 0),
        ("D", 0),
        ("D", 0),
        ("D", 0),
        ("D", 0),
        ("D", 0),
    ];
    let group: Vec<String> = rows.iter().map(|r| r.0.to_string()).collect();
    let y: Vec<u64> = rows.iter().map(|r| r.1).collect();
    let z = vec![1.0; rows.len()];
    HierarchicalDataset::from_long(&group, &y, &[], &z, 0, 1).expect("toy dataset is valid")
}

fn alpha_config(family: Family, seed: u64) -> FitConfig {
    let mut config = FitConfig::new(family, CollapseCriterion::ConfidenceLevel(0.05));
    config.seed = seed;
    config
}

#[test]
fn well_separated_intensities_split_into_two_clusters() {
    let data = toy_poisson();
    let result = fit(&data, &alpha_config(Family::Poisson, 7)).expect("fit should succeed");

    assert_eq!(result.support.n_points(), 2, "two intensity levels, two clusters");
    assert!(result.converged(), "toy problem should converge well before the cap");
    assert!(
        result.support.point(0)[0] < result.support.point(1)[0],
        "support must be sorted by ascending first coordinate"
    );
    assert_eq!(
        result.assignments,
        vec![2, 2, 1, 1],
        "high-count groups belong to the upper cluster, low-count to the lower"
    );
    let low = result.support.point(0)[0];
    let high = result.support.point(1)[0];
    assert!(
        (-2.0..=0.0).contains(&low),
        "lower intercept should be near ln of the low-group means, got {low}"
    );
    assert!(
        (2.0..=3.0).contains(&high),
        "upper intercept should be near ln of the high-group means, got {high}"
    );
    assert!(
        result.beta[0] > 0.0,
        "counts were built to rise with the covariate, got slope {}",
        result.beta[0]
    );
}

#[test]
fn threshold_extremes_drive_the_cluster_count() {
    let data = toy_poisson();

    let mut wide = FitConfig::new(Family::Poisson, CollapseCriterion::DistanceThreshold(1000.0));
    wide.seed = 7;
    let result = fit(&data, &wide).expect("fit should succeed");
    assert_eq!(
        result.support.n_points(),
        1,
        "a threshold beyond every distance merges everything"
    );
    assert!(
        (result.support.weight(0) - 1.0).abs() <= 1e-12,
        "a single cluster must carry all mass, got {}",
        result.support.weight(0)
    );

    let mut narrow = FitConfig::new(Family::Poisson, CollapseCriterion::DistanceThreshold(1e-6));
    narrow.seed = 7;
    let result = fit(&data, &narrow).expect("fit should succeed");
    assert_eq!(
        result.support.n_points(),
        2,
        "a vanishing threshold only removes clusters no group claims"
    );
}

#[test]
fn single_group_collapses_to_one_cluster() {
    let group = vec!["only".to_string(); 30];
    let y: Vec<u64> = (0..30).map(|j| 3 + (j % 4) as u64).collect();
    let x: Vec<f64> = (0..30).map(|j| (j as f64 / 15.0) - 1.0).collect();
    let z = vec![1.0; 30];
    let data = HierarchicalDataset::from_long(&group, &y, &x, &z, 1, 1).expect("valid dataset");

    let result = fit(&data, &alpha_config(Family::Poisson, 11)).expect("fit should succeed");
    assert_eq!(result.support.n_points(), 1, "one group can support only one cluster");
    assert_eq!(result.assignments, vec![1], "the lone group takes label 1");
    assert!(
        (result.support.weight(0) - 1.0).abs() <= 1e-12,
        "all mass on the single point"
    );
    assert_eq!(result.mean_entropy, 0.0, "deterministic membership has zero entropy");
}

#[test]
fn repeated_fit_with_same_seed_is_bitwise_identical() {
    let data = toy_poisson();
    let config = alpha_config(Family::Poisson, 42);
    let a = fit(&data, &config).expect("first fit");
    let b = fit(&data, &config).expect("second fit");

    assert_eq!(a.support.n_points(), b.support.n_points());
    for m in 0..a.support.n_points() {
        for (va, vb) in a.support.point(m).iter().zip(b.support.point(m)) {
            assert_eq!(va.to_bits(), vb.to_bits(), "support coordinates must match bitwise");
        }
        assert_eq!(
            a.support.weight(m).to_bits(),
            b.support.weight(m).to_bits(),
            "masses must match bitwise"
        );
    }
    for (va, vb) in a.beta.iter().zip(&b.beta) {
        assert_eq!(va.to_bits(), vb.to_bits(), "fixed effects must match bitwise");
    }
    assert_eq!(a.iterations, b.iterations, "iteration counts must match");
    for (ta, tb) in a.loglik_trace.iter().zip(&b.loglik_trace) {
        assert_eq!(
            ta.loglik.to_bits(),
            tb.loglik.to_bits(),
            "likelihood traces must match bitwise"
        );
    }
}

#[test]
fn different_seeds_agree_on_the_recovered_structure() {
    let data = toy_poisson();
    let mut reference: Option<(Vec<usize>, f64, f64)> = None;
    for seed in [1, 2, 3] {
        let result = fit(&data, &alpha_config(Family::Poisson, seed)).expect("fit should succeed");
        assert_eq!(
            result.support.n_points(),
            2,
            "seed {seed} should still find two clusters"
        );
        let summary = (
            result.assignments.clone(),
            result.support.point(0)[0],
            result.support.point(1)[0],
        );
        if let Some((assignments, low, high)) = &reference {
            assert_eq!(&summary.0, assignments, "assignments must not depend on the seed");
            assert!(
                (summary.1 - low).abs() < 1e-4 && (summary.2 - high).abs() < 1e-4,
                "converged support should agree across seeds: ({}, {}) vs ({low}, {high})",
                summary.1,
                summary.2
            );
        } else {
            reference = Some(summary);
        }
    }
}

#[test]
fn conservation_diagnostics_stay_within_bounds() {
    let data = toy_poisson();
    let result = fit(&data, &alpha_config(Family::Poisson, 7)).expect("fit should succeed");
    let d = &result.diagnostics;
    assert!(
        d.max_weight_sum_error <= 1e-12,
        "masses must stay normalized, worst error {}",
        d.max_weight_sum_error
    );
    assert!(
        d.max_posterior_row_error <= 1e-10,
        "posterior rows must stay normalized, worst error {}",
        d.max_posterior_row_error
    );
    assert!(
        d.min_inner_loglik_delta >= -1e-6,
        "inner iterations must not decrease the likelihood, worst delta {}",
        d.min_inner_loglik_delta
    );
    assert!(d.merges_within_segment, "merged points must stay between their parents");
}

#[test]
fn bernoulli_propensity_levels_split_into_two_clusters() {
    let data = toy_bernoulli();
    let result = fit(&data, &alpha_config(Family::Bernoulli, 5)).expect("fit should succeed");

    assert_eq!(result.support.n_points(), 2, "two propensity levels, two clusters");
    assert_eq!(
        result.assignments,
        vec![2, 2, 1, 1],
        "mostly-ones groups take the upper intercept"
    );
    assert!(
        result.support.point(0)[0] < 0.0 && result.support.point(1)[0] > 0.0,
        "intercept signs should bracket zero, got ({}, {})",
        result.support.point(0)[0],
        result.support.point(1)[0]
    );
    assert!(result.beta.is_empty(), "no fixed effects were requested");
    assert!(
        result.beta_stderr.is_none() && result.beta_p_values.is_none(),
        "no inference without fixed effects"
    );
}

#[test]
fn assignments_follow_the_posterior_argmax() {
    let data = toy_poisson();
    let result = fit(&data, &alpha_config(Family::Poisson, 7)).expect("fit should succeed");
    for i in 0..data.n_groups() {
        let row = result.weights.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .expect("nonempty row");
        assert_eq!(
            result.assignments[i],
            argmax + 1,
            "group {i} label must be the 1-based argmax of its posterior row {row:?}"
        );
    }
}

#[test]
fn fitted_means_use_the_assigned_cluster() {
    let data = toy_poisson();
    let result = fit(&data, &alpha_config(Family::Poisson, 7)).expect("fit should succeed");
    let mu = result.fitted_means(&data, Family::Poisson).expect("fitted means");
    assert_eq!(mu.len(), data.n_obs(), "one mean per observation");

    // First observation: group A (cluster label 2 → second support point).
    let c = result.support.point(result.assignments[0] - 1)[0];
    let expected = (result.beta[0] * data.x_row(0)[0] + c).exp();
    assert!(
        (mu[0] - expected).abs() <= 1e-12 * expected,
        "fitted mean must equal exp(xβ + c) for the assigned point: {} vs {expected}",
        mu[0]
    );
}
