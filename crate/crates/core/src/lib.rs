//! Offline continuous-time distributional RL with Gaussian-mixture policies.
//!
//! A value network `J(x, C, t)` over the cost-extended state is fit to logged
//! trajectories by minimizing a path-wise soft Hamilton-Jacobi negative
//! log-likelihood. The optimal stochastic policy is then read off in closed form
//! as a reweighted, shifted and shrunk copy of the behavioral mixture.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod hj_loss;
pub mod model;
pub mod oracles;
pub mod policy;
pub mod rng;
pub mod simulator;
pub mod trainer;
pub mod value_net;

pub use error::{Error, Result};
pub use model::{Dataset, ExtendedState, Matrix, ModelSpec, TerminalUtility, Trajectory};
pub use policy::{GaussianMixturePolicy, PolicyComponent, PosteriorPolicy, ValueGradients};
pub use value_net::ValueNetwork;
