//! Instrumented common confounding (ICC) estimators.
//!
//! Instruments that are only excluded conditional on unobserved common
//! confounders `U` become usable once outcome-inducing proxies `W` stand in
//! for `U`. The crate provides the linear estimator, exact discrete bridge
//! solvers, control-function machinery, sieve bridges, population oracles
//! and a Monte Carlo harness. The `icc` binary wraps [`cli`].

pub mod bridge_discrete;
pub mod cli;
pub mod control_function;
pub mod data_model;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod linear_icc;
pub mod oracle;
pub mod sieve_bridge;
pub mod synth;

pub use error::{IccError, Result};
