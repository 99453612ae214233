//! Numerical laboratory for two-layer overparameterized ReLU networks
//! trained by SGD on well-separated mixture data.
//!
//! The crate measures three behaviors of such training runs: activation
//! patterns stay coupled to their initialization values, the weights end up
//! a short relative distance from where they started, and the accumulated
//! update W(T) - W(0) is approximately low rank. Everything is seeded and
//! bit-deterministic per seed.
//!
//! Module map:
//! - [`linalg`]: dense matrices, Jacobi singular values, finite differences
//! - [`data`]: mixture sampling, separability validation, IDX/CSV ingestion
//! - [`model`]: the network, its gradient, the frozen-indicator
//!   pseudo-gradient and pseudo-network, softmax error quantities
//! - [`train`]: minibatch SGD and weighted full-batch GD with diagnostics
//! - [`diagnostics`]: coupling, relative distance, accuracy, update spectra,
//!   sweep statistics
//! - [`lemmacheck`]: numerical verification of the checkable analytic
//!   statements

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod lemmacheck;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
