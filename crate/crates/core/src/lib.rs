//! Hierarchical non-stationary Poisson latent dynamical systems.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod simulator;
pub mod vbem;

pub use error::{Error, Result};
pub use gp::{build_kernel, gp_predict, kl_gaussian, BlockKernel, GaussianBelief};
pub use model::{
    log_rate, poisson_loglik, Hyperparams, LogRateTrace, ModelIIParams, ModelIParams, RidgeBlock,
    SharedParams, SpikeDataset,
};
