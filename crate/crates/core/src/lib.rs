//! Linear (Koopman) surrogates of nonlinear dynamical systems: closed-form
//! EDMD, a trained neural embedding with covariance and inverse-control
//! regularizers, box-constrained linear MPC on the learned models, and an
//! experiment harness measuring power-law error scaling in sample size and
//! latent dimension.

pub mod diagnostics;
pub mod edmd;
pub mod envs;
pub mod error;
pub mod io;
pub mod mpc;
pub mod net;
pub mod numerics;
pub mod scaling;

pub use error::{Error, Result};
