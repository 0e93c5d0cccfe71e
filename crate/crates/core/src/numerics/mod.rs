//! Shared dense linear algebra, deterministic RNG, Adam, and
//! derivative verification utilities.

mod adam;
mod eig;
mod finite_diff;
mod matrix;
mod rng;
mod svd;

pub use adam::{adam_step, AdamState};
pub use eig::{cond_spd, eig_sym};
pub use finite_diff::{finite_diff_grad, max_rel_deviation};
pub use matrix::{gemm, gemm_nt, gemm_tn, Matrix};
pub use rng::Rng;
pub use svd::{nearest_orthogonal, pinv, svd};
