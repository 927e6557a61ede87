//! Bayes-optimal limits and TAP iterations for rank-one spikes hidden in
//! rotationally invariant noise, Y = (lambda / N) X X^T + Z.

pub mod ensemble;
pub mod error;
pub mod oamp_se;
pub mod priors;
pub mod quadrature;
pub mod replica;
pub mod spectra;
pub mod tap;

pub use error::{Error, Result};
