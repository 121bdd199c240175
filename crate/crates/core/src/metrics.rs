//! Goodness-of-fit summaries, posterior entropy, and the threshold elbow
//! scan.

use crate::data::HierarchicalDataset;
use crate::em::{fit, CollapseCriterion, FitConfig, PosteriorWeights};
use crate::error::{Error, Result};

/// Goodness-of-fit summaries for count responses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CountGof {
    /// Mean squared error `mean (y − ŷ)²`.
    pub mse: f64,
    /// Mean squared error on the log scale `mean (ln(y+1) − ln(ŷ+1))²`.
    pub mse_log: f64,
    /// Dispersion-style statistic `mean (y − ŷ)²/(ŷ + 1)`.
    pub chi_square: f64,
}

/// Goodness-of-fit summaries for binary responses at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BinaryGof {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

/// ROC summary over a score vector.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RocAnalysis {
    /// Trapezoidal area under the ROC curve.
    pub auc: f64,
    /// Score threshold maximizing Youden's J (classify positive when the
    /// score is ≥ the threshold; the highest such threshold on ties).
    pub best_threshold: f64,
    /// Maximum of `sensitivity + specificity − 1`.
    pub youden_j: f64,
}

/// Predicted counts from fitted means: round half to even.
pub fn rounded_counts(mu: &[f64]) -> Vec<f64> {
    mu.iter().map(|&v| v.round_ties_even()).collect()
}

/// Count metrics between observed responses and predicted counts.
pub fn count_metrics(y: &[u64], predicted: &[f64]) -> Result<CountGof> {
    if y.len() != predicted.len() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "{} responses vs {} predictions",
            y.len(),
            predicted.len()
        )));
    }
    let n = y.len() as f64;
    let mut mse = 0.0;
    let mut mse_log = 0.0;
    let mut chi_square = 0.0;
    for (&yi, &pi) in y.iter().zip(predicted) {
        if !pi.is_finite() || pi < 0.0 {
            return Err(Error::Invalid(format!(
                "predicted count {pi} is not a valid nonnegative value"
            )));
        }
        let diff = yi as f64 - pi;
        mse += diff * diff;
        let log_diff = (yi as f64 + 1.0).ln() - (pi + 1.0).ln();
        mse_log += log_diff * log_diff;
        chi_square += diff * diff / (pi + 1.0);
    }
    Ok(CountGof {
        mse: mse / n,
        mse_log: mse_log / n,
        chi_square: chi_square / n,
    })
}

/// Binary metrics at a fixed probability threshold (classify positive when
/// `μ̂ > threshold`). Needs both classes present in `y`.
pub fn binary_metrics(y: &[u64], mu: &[f64], threshold: f64) -> Result<BinaryGof> {
    if y.len() != mu.len() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "{} responses vs {} fitted probabilities",
            y.len(),
            mu.len()
        )));
    }
    let mut tp = 0u64;
    let mut tn = 0u64;
    let mut fp = 0u64;
    let mut fnn = 0u64;
    for (&yi, &mi) in y.iter().zip(mu) {
        let predicted = mi > threshold;
        match (yi, predicted) {
            (1, true) => tp += 1,
            (1, false) => fnn += 1,
            (0, false) => tn += 1,
            (0, true) => fp += 1,
            _ => {
                return Err(Error::Invalid(format!(
                    "binary metrics need 0/1 responses, got {yi}"
                )))
            }
        }
    }
    let positives = tp + fnn;
    let negatives = tn + fp;
    if positives == 0 || negatives == 0 {
        return Err(Error::Invalid(
            "binary metrics need both classes present in the response".into(),
        ));
    }
    Ok(BinaryGof {
        sensitivity: tp as f64 / positives as f64,
        specificity: tn as f64 / negatives as f64,
        accuracy: (tp + tn) as f64 / (positives + negatives) as f64,
    })
}

/// ROC curve analysis of scores against binary labels.
///
/// The curve walks the unique score values in descending order with the rule
/// "positive when score ≥ threshold"; the area uses the trapezoid rule, so
/// tied scores contribute diagonal segments (equivalently, ties get half
/// credit, matching the rank-statistic definition of the AUC).
pub fn roc_analysis(y: &[u64], scores: &[f64]) -> Result<RocAnalysis> {
    if y.len() != scores.len() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "{} labels vs {} scores",
            y.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    let positives = y.iter().filter(|&&v| v == 1).count();
    let negatives = y.iter().filter(|&&v| v == 0).count();
    if positives + negatives != y.len() {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::Invalid(
            "ROC analysis needs both classes present in the labels".into(),
        ));
    }

    // Unique thresholds, descending.
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.reverse();

    let mut auc = 0.0;
    let mut best_threshold = thresholds[0];
    let mut youden_j = f64::NEG_INFINITY;
    let mut prev_fpr = 0.0;
    let mut prev_tpr = 0.0;
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&yi, &si) in y.iter().zip(scores) {
            if si >= t {
                if yi == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let tpr = tp as f64 / positives as f64;
        let fpr = fp as f64 / negatives as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        let j = tpr - (1.0 - (1.0 - fpr)) - 0.0; // tpr − fpr
        if j > youden_j {
            youden_j = j;
            best_threshold = t;
        }
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    auc += (1.0 - prev_fpr) * (1.0 + prev_tpr) * 0.5; // close the curve at (1,1)
    Ok(RocAnalysis {
        auc,
        best_threshold,
        youden_j,
    })
}

/// Posterior entropy per group, `E_i = −Σ_m W_im ln W_im` (with
/// `0·ln 0 = 0`), and its average.
pub fn entropy(w: &PosteriorWeights) -> (Vec<f64>, f64) {
    let per_group: Vec<f64> = (0..w.n_groups())
        .map(|i| {
            -w.row(i)
                .iter()
                .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .collect();
    let mean = per_group.iter().sum::<f64>() / per_group.len() as f64;
    (per_group, mean)
}

/// One grid point of a threshold elbow scan.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ElbowPoint {
    pub t: f64,
    pub mean_entropy: f64,
    pub m_hat: usize,
}

/// Fit the model once per threshold in `t_grid` (distance criterion) on a
/// fixed dataset and report average entropy and cluster count per threshold.
/// The grid is deduplicated and traversed in ascending order; a descending
/// input is accepted with a warning.
pub fn elbow_scan(
    data: &HierarchicalDataset,
    base: &FitConfig,
    t_grid: &[f64],
) -> Result<Vec<ElbowPoint>> {
    if t_grid.is_empty() {
        return Err(Error::Invalid("elbow scan needs a nonempty threshold grid".into()));
    }
    let mut grid = t_grid.to_vec();
    if grid.windows(2).any(|w| w[0] > w[1]) {
        log::warn!("threshold grid was not ascending; sorting it");
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut out = Vec::with_capacity(grid.len());
    for &t in &grid {
        let mut config = base.clone();
        config.criterion = CollapseCriterion::DistanceThreshold(t);
        let result = fit(data, &config)?;
        out.push(ElbowPoint {
            t,
            mean_entropy: result.mean_entropy,
            m_hat: result.support.n_points(),
        });
    }
    Ok(out)
}
