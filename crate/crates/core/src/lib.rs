//! Multilevel regression and poststratification (MRP) with LOO-based model
//! comparison, built around two replicated simulation designs.
//!
//! The pipeline: [`sim`] generates populations and biased samples, [`raking`]
//! builds survey weights, [`inference`] fits Bayesian multilevel logistic
//! models by adaptive HMC, [`poststrat`] aggregates cell predictions into
//! population and small-area estimands, [`loo`] computes PSIS-LOO and its
//! survey-weighted variant, [`scoring`] evaluates everything against the
//! simulation truth, and [`harness`] orchestrates the replicate studies and
//! report generation.

pub mod error;
pub mod harness;
pub mod inference;
pub mod loo;
pub mod math;
pub mod poststrat;
pub mod raking;
pub mod rng;
pub mod scoring;
pub mod sim;

pub use error::{Error, Result};
