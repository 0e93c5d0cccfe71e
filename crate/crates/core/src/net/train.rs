//! Mini-batch Adam training loop for the neural Koopman model.

use super::loss::{loss_pred, total_loss_and_grads, LOSS_CLIP};
use super::model::KoopmanModel;
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Rng};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollout horizon T (steps).
    pub t: usize,
    /// Temporal discount factor.
    pub beta: f64,
    pub w_cov: f64,
    pub w_ctrl: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Ridge of the inverse-control pseudoinverse.
    pub eps_b: f64,
    pub seed: u64,
    /// Latent dimension multiplier of the model this config trains.
    pub n_mult: usize,
    /// Optional global Adam-step cap (0 = no cap) for wall-clock budgeting.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t: 5,
            beta: 0.9,
            w_cov: 1.0,
            w_ctrl: 0.1,
            batch: 256,
            epochs: 200,
            lr: 1e-3,
            eps_b: 1e-6,
            seed: 0,
            n_mult: 4,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Discount normalizer W = sum_{j=1..T} beta^j.
    pub fn w_norm(&self) -> f64 {
        (1..=self.t).map(|j| self.beta.powi(j as i32)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::Config("horizon t must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config("beta must be in (0, 1]".into()));
        }
        if self.w_cov < 0.0 || self.w_ctrl < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.n_mult < 1 {
            return Err(Error::Config("n_mult must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_pred: Vec<f64>,
    pub epoch_cov: Vec<f64>,
    pub epoch_ctrl: Vec<f64>,
    /// Held-out prediction error: undiscounted mean per-window loss_pred on
    /// the test split at the training horizon.
    pub eps_test: f64,
    pub diverged: bool,
    pub steps: usize,
    pub wall_s: f64,
}

/// Undiscounted multi-step test error at horizon `t`.
pub fn eval_test_eps(model: &KoopmanModel, data: &Dataset, t: usize) -> Result<f64> {
    let cfg = TrainConfig {
        t,
        beta: 1.0,
        ..TrainConfig::default()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for w in data.test_windows() {
        if w.states.len() < t + 1 {
            continue;
        }
        total += loss_pred(model, w, &cfg)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("no test windows long enough for horizon".into()));
    }
    Ok(total / count as f64)
}

/// Mini-batch Adam over the composite loss with a fixed shuffling stream.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(KoopmanModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    if data.t_win < cfg.t {
        return Err(Error::Config(format!(
            "dataset windows have {} transitions, horizon needs {}",
            data.t_win, cfg.t
        )));
    }
    // the last train window may be truncated below the horizon
    let windows: Vec<_> = data.train_windows().filter(|w| w.transitions() >= cfg.t).collect();
    if windows.is_empty() {
        return Err(Error::Config("empty train split".into()));
    }
    let mut model = KoopmanModel::init(data.env.n_x, data.env.n_u, cfg.n_mult, cfg.seed)?;
    let mut adam = AdamState::new(model.params.len(), cfg.lr);
    let mut shuffle_rng = Rng::substream(cfg.seed, 100);
    let decay_epoch = ((cfg.epochs as f64) * 0.8).ceil() as usize;

    let mut report = TrainReport {
        epoch_pred: Vec::with_capacity(cfg.epochs),
        epoch_cov: Vec::with_capacity(cfg.epochs),
        epoch_ctrl: Vec::with_capacity(cfg.epochs),
        eps_test: f64::NAN,
        diverged: false,
        steps: 0,
        wall_s: 0.0,
    };
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut bad_epochs = 0usize;
    let mut capped = false;

    'epochs: for epoch in 0..cfg.epochs {
        if epoch == decay_epoch && cfg.epochs > 0 {
            adam.lr = cfg.lr * 0.1;
        }
        shuffle_rng.shuffle(&mut order);
        let (mut sum_pred, mut sum_cov, mut sum_ctrl, mut sum_total) = (0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<_> = chunk.iter().map(|&i| windows[i]).collect();
            let (parts, grads) = total_loss_and_grads(&model, &batch, cfg)?;
            let (new_params, new_state) = adam_step(&model.params, &grads, &adam)?;
            model.params = new_params;
            adam = new_state;
            report.steps += 1;
            sum_pred += parts.pred;
            sum_cov += parts.cov;
            sum_ctrl += parts.ctrl;
            sum_total += parts.total;
            n_batches += 1;
            if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                capped = true;
            }
            if capped {
                break;
            }
        }
        let inv = 1.0 / n_batches.max(1) as f64;
        report.epoch_pred.push(sum_pred * inv);
        report.epoch_cov.push(sum_cov * inv);
        report.epoch_ctrl.push(sum_ctrl * inv);
        if sum_total * inv > LOSS_CLIP * 0.999 {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                report.diverged = true;
                break 'epochs;
            }
        } else {
            bad_epochs = 0;
        }
        if capped {
            break;
        }
    }

    report.eps_test = eval_test_eps(&model, data, cfg.t)?;
    report.wall_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, EnvSpec, Trajectory};
    use crate::numerics::Rng;

    fn linear_dataset(n_windows: usize, t_win: usize, seed: u64) -> Dataset {
        // scalar system x+ = 0.9 x embedded in a 3-state polynomial env shell
        let mut rng = Rng::new(seed);
        let windows: Vec<Trajectory> = (0..n_windows + 8)
            .map(|_| {
                let mut x = rng.uniform(-1.0, 1.0);
                let mut states = vec![vec![x]];
                for _ in 0..t_win {
                    x *= 0.9;
                    states.push(vec![x]);
                }
                Trajectory {
                    states,
                    controls: vec![vec![]; t_win],
                }
            })
            .collect();
        let mut env = EnvSpec::polynomial(3);
        env.n_x = 1;
        env.n_u = 0;
        env.state_lo = vec![-1.0];
        env.state_hi = vec![1.0];
        Dataset {
            train_idx: (0..n_windows).collect(),
            test_idx: (n_windows..n_windows + 8).collect(),
            windows,
            env,
            seed,
            m: n_windows * t_win,
            t_win,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = linear_dataset(8, 3, 1);
        let cfg = TrainConfig {
            t: 3,
            epochs: 0,
            n_mult: 1,
            w_ctrl: 0.0,
            ..TrainConfig::default()
        };
        let (model, report) = train(&data, &cfg).unwrap();
        let fresh = KoopmanModel::init(1, 0, 1, cfg.seed).unwrap();
        assert_eq!(model, fresh);
        assert!(report.eps_test.is_finite());
        assert!(report.epoch_pred.is_empty());
    }

    #[test]
    fn deterministic_training() {
        let data = generate_dataset(&EnvSpec::damped_pendulum(), 30, 3, 5).unwrap();
        let cfg = TrainConfig {
            t: 3,
            epochs: 2,
            batch: 8,
            n_mult: 1,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(&data, &cfg).unwrap();
        let (m2, r2) = train(&data, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.eps_test.to_bits(), r2.eps_test.to_bits());
        assert_eq!(r1.epoch_pred, r2.epoch_pred);
    }

    #[test]
    fn fits_exactly_linear_data() {
        let data = linear_dataset(48, 3, 2);
        let cfg = TrainConfig {
            t: 3,
            epochs: 150,
            batch: 48,
            lr: 5e-3,
            n_mult: 1,
            w_cov: 0.0,
            w_ctrl: 0.0,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &cfg).unwrap();
        let last = *report.epoch_pred.last().unwrap();
        assert!(last < 1e-5, "final train L_pred {last}");
    }

    #[test]
    fn max_steps_caps_work() {
        let data = linear_dataset(32, 3, 3);
        let cfg = TrainConfig {
            t: 3,
            epochs: 50,
            batch: 8,
            n_mult: 1,
            w_ctrl: 0.0,
            max_steps: 5,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &cfg).unwrap();
        assert_eq!(report.steps, 5);
    }

    #[test]
    fn rejects_short_windows() {
        let data = linear_dataset(8, 2, 4);
        let cfg = TrainConfig {
            t: 5,
            n_mult: 1,
            ..TrainConfig::default()
        };
        assert!(train(&data, &cfg).is_err());
    }
}
