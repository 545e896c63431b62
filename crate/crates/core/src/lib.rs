//! Small area estimation for probabilistically linked data.
//!
//! When the response variable is obtained by record linkage rather than
//! direct observation, wrong links act like measurement error with a very
//! particular structure: within a linkage block the observed response is a
//! random permutation of the true responses. This crate implements
//! estimators for small area means that correct for that structure under an
//! exchangeable linkage error model, together with analytic MSE estimators
//! and a Monte Carlo engine for studying them:
//!
//! * [`linkage`] — the exchangeable linkage error model itself: correction
//!   probabilities, expected permutation matrices, corrected design
//!   matrices, a consistent permutation sampler and audit-sample estimation
//!   of the correct-linkage probabilities.
//! * [`lmm`] — linkage-corrected linear mixed model fits (GLS +
//!   pseudo-REML), the star/star-star EBLUP area predictors and their
//!   Prasad–Rao style MSE estimators.
//! * [`robust`] — robust (Huber-type) estimating equations for the mixed
//!   model, the star-REBLUP predictor, sandwich covariances and a
//!   conditional MSE estimator.
//! * [`mquantile`] — linkage-corrected M-quantile regression over a grid of
//!   orders, bias-corrected M-quantile coefficients, the star-MQ predictor
//!   and its linearization MSE estimator.
//! * [`sim`] — synthetic population generation, linkage simulation, SRSWOR
//!   sampling and a seeded, parallel Monte Carlo harness with the usual
//!   relative bias / RRMSE / efficiency summaries.

pub mod data;
pub mod error;
pub mod linkage;
pub mod lmm;
pub mod mquantile;
pub mod normal;
pub mod robust;
pub mod sim;

pub use data::{AreaAggregates, AreaPrediction, Cell, LinkedSample, PredictionComponents};
pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
