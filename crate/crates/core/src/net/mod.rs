//! Neural Koopman model: state-augmented encoder, latent linear dynamics,
//! the three-term training objective with exact reverse-mode gradients, the
//! Adam training loop, and the parameter-matched NNDM baseline.

pub mod loss;
pub mod model;
pub mod nndm;
pub mod train;

pub use loss::{loss_cov, loss_ctrl, loss_pred, rollout_latent, total_loss_and_grads, LossParts, Rollout};
pub use model::{EncodeCache, KoopmanModel, Layout, HIDDEN};
pub use nndm::{nndm_step, train_nndm, NndmModel};
pub use train::{eval_test_eps, train, TrainConfig, TrainReport};
