//! Small-area estimation of domain proportions.
//!
//! The crate covers the full chain from a finite survey population to
//! accuracy tables:
//!
//! * [`population`]: persons, households, domains, covariates, and a
//!   synthetic Labor-Force-Survey-like population generator.
//! * [`sampling`]: household PPS sampling and inclusion probabilities.
//! * [`direct`]: Hájek / Horvitz–Thompson domain proportions and their
//!   variance estimators.
//! * [`smoothing`]: generalized variance function smoothing and combined
//!   variance estimates.
//! * [`area`]: GLS, Fay–Herriot moment fitting, EBLUP and its MSE estimator,
//!   regression-synthetic estimates.
//! * [`composite`]: design-based composite estimators, their MSE estimators
//!   and the adaptive sample-size-dependent optimizer.
//! * [`bootstrap`]: Rao–Wu–Yue household bootstrap.
//! * [`sim`]: the Monte Carlo harness, accuracy measures and reports.

pub mod area;
pub mod bootstrap;
pub mod composite;
pub mod direct;
pub mod error;
pub mod population;
pub mod sampling;
pub mod sim;
pub mod smoothing;

mod rng;

pub use error::{Error, Result};
pub use population::{DomainFrame, Population, StudyVariable};
