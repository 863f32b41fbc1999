//! Gaussian-process surrogates for uncertainty quantification.
//!
//! The crate covers exact GP regression with hyperparameter estimation,
//! active-learning designs, and the downstream tasks built on them:
//! Bayesian quadrature, failure-probability estimation, Bayesian
//! optimization, surrogate-based parameter estimation and Sobol
//! sensitivity analysis, plus a pendulum testbed that exercises them.

pub mod bayesopt;
pub mod calibrate;
pub mod design;
pub mod dist;
pub mod error;
pub mod gp;
pub mod hyper;
pub mod io;
pub mod kernel;
pub mod model;
pub mod quadrature;
pub mod risk;
pub mod sensitivity;
pub mod stats;
pub mod testbed;

pub use error::{Error, Result};
