//! Estimation of continuous-time Markov chain generators from discretely
//! observed rating transition matrices.
//!
//! The centrepiece is an EM estimator whose E-step and observed-data
//! Hessian are evaluated in closed form through block matrix exponentials.
//! Around it sit the deterministic log-matrix repairs, three MCMC
//! estimators, a simulation harness and a one-factor credit risk engine.

pub mod em;
pub mod error;
pub mod hessian;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod reference;
pub mod regularize;
pub mod risk;
pub mod simulate;

pub use error::{Error, Result, Violation};
pub use model::{GeneratorMatrix, ObservationSet, TransitionMatrix};
