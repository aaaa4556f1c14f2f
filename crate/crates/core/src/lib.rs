//! Robust generalized method of moments via spectral gradient reweighting.
//!
//! The crate is organised bottom-up:
//!
//! - [`specmat`]: dense symmetric matrices, eigendecomposition, Gibbs states.
//! - [`weights`]: the capped probability simplex, its relative-entropy
//!   projection, and the geometric median.
//! - [`sgr`]: the spectral gradient reweighting primitive (a multiplicative
//!   weights / matrix multiplicative weights game around a fixed center,
//!   wrapped in a fixed-center update loop).
//! - [`optim`]: L-BFGS with a strong Wolfe line search and a scaled
//!   stabilization test.
//! - [`engine`]: the generic reweight-then-optimize driver and the
//!   finite-sample bound calculators.
//! - [`dgmm`]: the low-rank Gaussian mixture moment model, its baselines and
//!   error metrics.
//! - [`datagen`]: seeded synthetic gradient clouds and contaminated mixtures.

pub mod datagen;
pub mod dgmm;
pub mod engine;
mod error;
pub mod optim;
pub mod sgr;
pub mod specmat;
pub mod weights;

pub use error::{Error, Result};
