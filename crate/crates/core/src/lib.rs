//! Probit stick-breaking mixtures of binomials whose stick-breaks depend on
//! covariates through low-rank CP-factorized coefficient arrays, with
//! optional low-rank subject random effects.
//!
//! The crate covers the tensor algebra, the augmented Gibbs sampler,
//! posterior predictive scoring, logistic comparators, simulation designs and
//! a command-line front end.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod predictive;
pub mod sampling;
pub mod simstudy;
pub mod store;
pub mod tensor;

pub use data::{Dataset, Standardizer};
pub use error::{Error, Result};
pub use gibbs::{run_chain, ChainConfig, Sampler};
pub use model::{CoefStructure, ErrorStructure, ModelConfig, ParamState};
pub use store::DrawStore;
