//! Bayesian multilevel logistic models and posterior sampling.
//!
//! Models have one varying intercept per level of each included variable,
//! with either an exchangeable normal prior or a first-order autoregressive
//! prior across the ordered levels. Sampling is adaptive Hamiltonian Monte
//! Carlo on a non-centered, unconstrained parameterization.

mod diagnostics;
mod hmc;
mod model;

pub use diagnostics::{ess, split_rhat, Diagnostics};
pub use hmc::{sample_posterior, SamplerConfig};
pub use model::{
    cell_probability_draws, log_joint, pointwise_loglik, var_prior_log_density, GroupedData,
    Model, ModelSpec, Params, PosteriorDraws, PriorKind,
};
