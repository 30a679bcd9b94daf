//! Bayesian single-index regression for high-dimensional longitudinal data.
//!
//! Each subject carries a high-dimensional covariate vector `X_i` and a
//! low-dimensional one `Z_i`. Region- and time-indexed outcomes follow
//!
//! ```text
//! Y_ijt = a_0j(X_i'β, Z_i'η) − a_1j(X_i'β, Z_i'η) F_0(t) + ε_ijt
//! ```
//!
//! with tensor-product B-spline surfaces `a_νj`, a monotone time warp `F_0`,
//! and unit directions `β`, `η` parametrized by polar angles. Sparsity in `β`
//! is induced by a spike-and-slab prior on the angles. Posterior sampling
//! mixes conjugate Gibbs updates with reflective Hamiltonian Monte Carlo.
//!
//! Module map:
//!
//! - [`splines`]: B-spline bases, even tensor surfaces, monotone time warp.
//! - [`polar`]: unit vectors ↔ polar angles, projection gradients.
//! - [`priors`]: spike-and-slab angle priors, coefficient prior, DP scale mixture.
//! - [`model`]: data, state, likelihood, gradients, conjugate conditionals.
//! - [`sampler`]: reflective HMC, sweeps, adaptation, chains.
//! - [`selection`]: BIC basis-size selection, posterior variable selection.
//! - [`experiments`]: simulation generators, baselines, evaluation metrics.
//! - [`persist`]: binary chain files and delimited-text data files.

pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod persist;
pub mod polar;
pub mod priors;
pub mod sampler;
pub mod selection;
pub mod splines;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
