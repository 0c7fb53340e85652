//! Non-ergodic path-effect estimation from within-site Fourier amplitude
//! spectrum residuals.
//!
//! Two estimators share one dataset model: Gaussian-process regression with a
//! composite path kernel ([`gp`]) and a conditional variational autoencoder
//! ([`cgm`]). [`variogram`] supplies correlation lengths and continuity
//! checks; [`analysis`] holds the validation statistics.

pub mod analysis;
pub mod cgm;
pub mod dataset;
mod error;
pub mod format;
pub mod geo;
pub mod gp;
pub mod linalg;
pub mod variogram;

pub use error::{Error, Result};
