//! Bayesian D-optimal pooled testing.
//!
//! The crate is organised around the sequential loop: a cluster prior and a
//! per-sample pooled-test likelihood ([`model`]), a Gibbs sampler for the
//! posterior over infection states ([`posterior`]), a nested Monte-Carlo
//! mutual-information estimator with a hill-climbing pool search ([`design`]),
//! and the propose/observe/update driver ([`dope`]). Reference strategies
//! live in [`baselines`] and simulation campaigns in [`harness`].

pub mod baselines;
pub mod config;
pub mod design;
pub mod dope;
pub mod error;
pub mod harness;
pub mod model;
pub mod posterior;
pub mod rng;
pub mod transcript;

pub use error::{DopeError, Result};
