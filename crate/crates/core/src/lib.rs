//! Semi-parametric generalized linear mixed models with discrete random
//! effects, for Poisson and Bernoulli responses under canonical links.
//!
//! The random coefficients are not assumed Gaussian: their mixing
//! distribution is estimated as a discrete set of support points with masses,
//! and the number of points is discovered during estimation by merging
//! support points the data cannot tell apart — either when their confidence
//! regions overlap (`α` rule) or when they fall within a distance threshold
//! (`t` rule). Groups are then classified by their posterior membership
//! weights.
//!
//! Entry points:
//! - [`data::HierarchicalDataset`] holds the grouped observations;
//! - [`em::fit`] estimates the model from a [`em::FitConfig`];
//! - [`simulate`] generates benchmark datasets and replication studies;
//! - [`metrics`] provides goodness-of-fit summaries and the threshold
//!   elbow scan.

pub mod collapse;
pub mod data;
pub mod em;
pub mod error;
pub mod family;
pub mod inference;
pub mod metrics;
pub mod optim;
pub mod simulate;

pub use data::HierarchicalDataset;
pub use em::{fit, CollapseCriterion, DiscreteSupport, FitConfig, FitResult, PosteriorWeights};
pub use error::{Error, Result};
pub use family::Family;
