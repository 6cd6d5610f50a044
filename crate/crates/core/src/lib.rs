//! Interactive elicitation of feature-similarity priors for Bayesian linear
//! regression with few samples and many features.
//!
//! A user (or a simulated one) marks pairs of features as similar or
//! dissimilar on a 2-D map of the features. The feedback trains a
//! feature-similarity metric, the metric becomes a full prior covariance over
//! regression coefficients, and a variational Bayesian linear model is fitted
//! under that prior.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod elicitation;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod linreg;
pub mod metric;
pub mod simuser;
pub mod synthetic;
pub mod truncnorm;

pub use error::{Error, Result};
