//! Heteroskedasticity-robust instrumental-variables estimation and
//! overidentification testing under weak instruments.
//!
//! The crate covers the k-class family (2SLS, LIML), two-step GMM, Hansen's J,
//! robust score and Kleibergen-Paap tests, the effective first-stage F, a
//! sampler for the weak-instrument limiting distributions, a Monte Carlo
//! engine and an EIS regression pipeline.

pub mod asymptotics;
pub mod chisq;
pub mod cli;
pub mod covariance;
pub mod designs;
pub mod empirics;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod overid;
pub mod simulation;
pub mod strength;

pub use covariance::CovarianceSpec;
pub use error::{IvError, Result};
pub use estimators::{EstimationResult, Method};
pub use model::IvDataset;
pub use overid::{TestKind, TestResult};
