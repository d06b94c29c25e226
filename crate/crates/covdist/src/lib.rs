//! Consistent estimation of distances between covariance matrices.
//!
//! The crate covers estimators of Euclidean, symmetrized Kullback-Leibler and
//! log-Euclidean distances built from sample covariance matrices, the Gaussian
//! law describing their fluctuations, and the resulting probability of
//! clustering a collection of sample covariance matrices correctly.

pub mod asymptotics;
pub mod clustering;
pub mod contour;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod spectral;
pub mod specfun;

pub use error::{Error, Result};
pub use num_complex::Complex64;
