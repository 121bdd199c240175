//! Grouped (hierarchical) data container.
//!
//! Observations are stored contiguously per group, with groups ordered by
//! first appearance in the input. The container caches `ln(y!)` so Poisson
//! log-densities in hot loops never touch the gamma function.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::family::Family;

/// A two-level dataset: `J` observations nested in `N` nonempty groups,
/// with `P` fixed-effect covariates and `Q ≥ 1` random-effect covariates.
#[derive(Debug, Clone)]
pub struct HierarchicalDataset {
    y: Vec<u64>,
    /// Row-major `J × P`.
    x: Vec<f64>,
    /// Row-major `J × Q`.
    z: Vec<f64>,
    /// Half-open observation ranges, one per group, covering `0..J`.
    groups: Vec<Range<usize>>,
    labels: Vec<String>,
    n_fixed: usize,
    n_random: usize,
    ln_factorial: Vec<f64>,
}

impl HierarchicalDataset {
    /// Build a dataset from long-format columns: one entry per observation.
    ///
    /// Rows are regrouped by `group` label in order of first appearance;
    /// within a group the original row order is preserved. `x` and `z` are
    /// row-major with `n_fixed` and `n_random` entries per observation
    /// (`n_fixed` may be zero, `n_random` must be at least one).
    pub fn from_long(
        group: &[String],
        y: &[u64],
        x: &[f64],
        z: &[f64],
        n_fixed: usize,
        n_random: usize,
    ) -> Result<Self> {
        let j = group.len();
        if j == 0 {
            return Err(Error::Invalid("dataset has no observations".into()));
        }
        if n_random == 0 {
            return Err(Error::Invalid(
                "at least one random-effect covariate is required".into(),
            ));
        }
        if y.len() != j {
            return Err(Error::Dimension(format!(
                "{} responses for {} group labels",
                y.len(),
                j
            )));
        }
        if x.len() != j * n_fixed {
            return Err(Error::Dimension(format!(
                "fixed design has {} entries, expected {j} × {n_fixed}",
                x.len()
            )));
        }
        if z.len() != j * n_random {
            return Err(Error::Dimension(format!(
                "random design has {} entries, expected {j} × {n_random}",
                z.len()
            )));
        }
        for (idx, row) in x.chunks(n_fixed.max(1)).take(if n_fixed == 0 { 0 } else { j }).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "non-finite fixed covariate in row {idx}"
                )));
            }
        }
        for (idx, row) in z.chunks(n_random).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "non-finite random covariate in row {idx}"
                )));
            }
        }

        // Order groups by first appearance, preserving within-group row order.
        let mut labels: Vec<String> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (row, label) in group.iter().enumerate() {
            match labels.iter().position(|l| l == label) {
                Some(pos) => members[pos].push(row),
                None => {
                    labels.push(label.clone());
                    members.push(vec![row]);
                }
            }
        }

        let mut y_out = Vec::with_capacity(j);
        let mut x_out = Vec::with_capacity(j * n_fixed);
        let mut z_out = Vec::with_capacity(j * n_random);
        let mut ranges = Vec::with_capacity(labels.len());
        let mut start = 0usize;
        for rows in &members {
            for &row in rows {
                y_out.push(y[row]);
                x_out.extend_from_slice(&x[row * n_fixed..(row + 1) * n_fixed]);
                z_out.extend_from_slice(&z[row * n_random..(row + 1) * n_random]);
            }
            ranges.push(start..start + rows.len());
            start += rows.len();
        }

        let ln_factorial = y_out
            .iter()
            .map(|&yi| statrs::function::gamma::ln_gamma(yi as f64 + 1.0))
            .collect();

        Ok(Self {
            y: y_out,
            x: x_out,
            z: z_out,
            groups: ranges,
            labels,
            n_fixed,
            n_random,
            ln_factorial,
        })
    }

    /// Number of groups `N`.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total number of observations `J`.
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Number of fixed-effect covariates `P` (may be zero).
    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    /// Number of random-effect covariates `Q`.
    pub fn n_random(&self) -> usize {
        self.n_random
    }

    /// Observation rows belonging to group `i`.
    pub fn group_rows(&self, i: usize) -> Range<usize> {
        self.groups[i].clone()
    }

    /// Label of group `i` as it appeared in the input.
    pub fn group_label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    /// All group labels in first-appearance order.
    pub fn group_labels(&self) -> &[String] {
        &self.labels
    }

    /// Response of observation `j`.
    #[inline]
    pub fn response(&self, j: usize) -> u64 {
        self.y[j]
    }

    /// All responses in row order.
    pub fn responses(&self) -> &[u64] {
        &self.y
    }

    /// Cached `ln(y_j!)`.
    #[inline]
    pub fn ln_factorial(&self, j: usize) -> f64 {
        self.ln_factorial[j]
    }

    /// Fixed covariate row of observation `j` (length `P`).
    #[inline]
    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.n_fixed..(j + 1) * self.n_fixed]
    }

    /// Random covariate row of observation `j` (length `Q`).
    #[inline]
    pub fn z_row(&self, j: usize) -> &[f64] {
        &self.z[j * self.n_random..(j + 1) * self.n_random]
    }

    /// Check the response against a family's domain (Bernoulli must be 0/1).
    pub fn validate_for(&self, family: Family) -> Result<()> {
        if family == Family::Bernoulli {
            for (j, &yj) in self.y.iter().enumerate() {
                if yj > 1 {
                    let group = self
                        .groups
                        .iter()
                        .position(|r| r.contains(&j))
                        .map(|i| self.labels[i].clone())
                        .unwrap_or_default();
                    return Err(Error::Invalid(format!(
                        "Bernoulli response must be 0 or 1 but observation {j} in group {group} is {yj}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy of the dataset with fixed-effect column `p` removed (used by the
    /// likelihood-ratio refits).
    pub fn drop_fixed_column(&self, p: usize) -> Result<Self> {
        if p >= self.n_fixed {
            return Err(Error::Invalid(format!(
                "cannot drop fixed column {p}: only {} columns",
                self.n_fixed
            )));
        }
        let keep = self.n_fixed - 1;
        let mut x = Vec::with_capacity(self.n_obs() * keep);
        for j in 0..self.n_obs() {
            for (col, &v) in self.x_row(j).iter().enumerate() {
                if col != p {
                    x.push(v);
                }
            }
        }
        Ok(Self {
            y: self.y.clone(),
            x,
            z: self.z.clone(),
            groups: self.groups.clone(),
            labels: self.labels.clone(),
            n_fixed: keep,
            n_random: self.n_random,
            ln_factorial: self.ln_factorial.clone(),
        })
    }
}
