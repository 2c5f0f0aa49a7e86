//! Separable-plus-banded covariance estimation for matrix-valued samples.
//!
//! Random surfaces observed on a `k1 x k2` grid often have covariances that
//! are nearly, but not exactly, separable: a Kronecker-type product term
//! captures the global interaction of the two grid dimensions, while a
//! banded stationary term absorbs local effects such as measurement noise or
//! weak dependencies near the diagonal. This crate estimates such
//! `C = A1 (x) A2 + B` decompositions from a stack of samples by shifted
//! partial tracing, selects the bandwidth of `B` by cross-validation,
//! applies and inverts the fitted covariance at matrix-multiplication cost,
//! and ships the simulation and goodness-of-fit machinery used to validate
//! the approach.
//!
//! Everything runs in `O(N K^3)` time and `O(N K^2)` memory; dense
//! fourth-order tensors exist only as size-capped brute-force oracles.

pub mod bandwidth;
pub mod error;
mod fft2;
pub mod estimators;
pub mod gof;
pub mod io;
pub mod model;
mod par;
pub mod simgen;
pub mod solver;
pub mod stationary;

pub use error::{Result, SptError};
