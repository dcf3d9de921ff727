//! Bayesian Tweedie compound Poisson–Gamma mixed-effects models fitted with
//! adversarial variational Bayes, plus the tools to check and evaluate them.
//!
//! Module map:
//!
//! - [`tweedie`]: parameter maps, densities, truncated marginals, sampling.
//! - [`autodiff`]: scalar reverse-mode tape, parameter storage, Adam.
//! - [`model`]: datasets, latent draws and the mixed-model log-likelihood.
//! - [`avb`]: inference network, critic, hyper prior, training, prediction.
//! - [`mcmc`]: random-walk Metropolis reference sampler.
//! - [`evaluation`]: ordered Lorenz curves, Gini indices, posterior summaries.
//! - [`data`]: CSV ingestion, splitting, standardization, simulation.
//! - [`cli`]: the `tweedie-avb` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod avb;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod mcmc;
pub mod tweedie;
pub mod model;
