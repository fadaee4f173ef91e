//! Estimation and testing for multidimensional parametric regression.
//!
//! Models `y_t = F_w(z_t) + e_t` with `y_t` in `R^d` are fitted by
//! minimizing `U_n(w) = log det Gamma_n(w)`, the log-determinant of the
//! empirical residual covariance. Alongside the estimator the crate offers
//! ordinary and (feasible) generalized least squares, the plug-in
//! information matrix, a chi-square test for nested models, stepwise
//! pruning with a BIC-like penalty, and a Monte Carlo harness.

pub mod cost;
pub mod data;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod optimize;
pub mod prune;
pub mod rng;
pub mod simulate;

pub use data::Dataset;
pub use error::{Error, Result};
pub use linalg::{RidgePolicy, SpdMatrix};
pub use model::{ModelFile, ModelKind, ModelSpec, ParamVector};
