//! Bayesian analog forecasting of spatio-temporal fields.
//!
//! A forcing field is reduced to basis coefficients and arranged into
//! lagged embedding matrices; historical embeddings close to the current
//! one (by Procrustes or Euclidean distance) vote, through a truncated
//! Gaussian kernel, for the future response. The kernel bandwidth,
//! neighbourhood size, embedding length and noise variance are sampled
//! with Metropolis-within-Gibbs and forecasts are drawn from the posterior
//! predictive distribution.

pub mod baselines;
pub mod basis;
pub mod bayes;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod kernel;
mod linalg;
pub mod metric;

pub use error::{Error, ErrorCategory, Result};
