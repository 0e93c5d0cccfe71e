//! Parameter-matched NNDM baseline: a plain MLP predicting x_{t+1} from
//! (x_t, u_t), trained with the same discounted multi-step rollout MSE and
//! full BPTT through the network.

use super::model::Layout;
use super::train::TrainConfig;
use crate::envs::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{adam_step, gemm, gemm_nt, gemm_tn, AdamState, Matrix, Rng};
use serde_json::json;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use super::loss::LOSS_CLIP;
use super::train::TrainReport;

const BLOWUP_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct NndmModel {
    pub n_x: usize,
    pub n_u: usize,
    pub hidden: usize,
    /// Flat [w1, b1, w2, b2, w3, b3]; w1 is hidden x (n_x + n_u),
    /// w3 is n_x x hidden.
    pub params: Vec<f64>,
}

struct NndmLayout {
    n_in: usize,
    n_x: usize,
    h: usize,
}

impl NndmLayout {
    fn w1(&self) -> Range<usize> {
        0..self.h * self.n_in
    }
    fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.h
    }
    fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.h * self.h
    }
    fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.h
    }
    fn w3(&self) -> Range<usize> {
        let s = self.b2().end;
        s..s + self.n_x * self.h
    }
    fn b3(&self) -> Range<usize> {
        let s = self.w3().end;
        s..s + self.n_x
    }
    fn len(&self) -> usize {
        self.b3().end
    }
}

/// Parameter count of an MLP with hidden width `h`.
fn mlp_param_count(n_x: usize, n_u: usize, h: usize) -> usize {
    let n_in = n_x + n_u;
    h * n_in + h + h * h + h + n_x * h + n_x
}

/// Hidden width whose MLP parameter count is closest to `target`.
pub fn matched_hidden(n_x: usize, n_u: usize, target: usize) -> usize {
    let mut best = (usize::MAX, 1);
    for h in 1..=2048 {
        let c = mlp_param_count(n_x, n_u, h);
        let diff = c.abs_diff(target);
        if diff < best.0 {
            best = (diff, h);
        }
        if c > 2 * target {
            break;
        }
    }
    best.1
}

struct NndmCache {
    input: Matrix,
    h1: Matrix,
    h2: Matrix,
    out: Matrix,
}

impl NndmModel {
    fn layout(&self) -> NndmLayout {
        NndmLayout {
            n_in: self.n_x + self.n_u,
            n_x: self.n_x,
            h: self.hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Initialize with the hidden width whose parameter count is nearest to
    /// the matched KoopmanModel's; errors if the match misses 2%.
    pub fn init_matched(n_x: usize, n_u: usize, n_mult: usize, seed: u64) -> Result<Self> {
        let target = Layout::new(n_x, n_u, n_mult).len();
        let hidden = matched_hidden(n_x, n_u, target);
        let count = mlp_param_count(n_x, n_u, hidden);
        let rel = count.abs_diff(target) as f64 / target as f64;
        if rel > 0.02 {
            return Err(Error::Config(format!(
                "no MLP width matches {target} params within 2% (best {count})"
            )));
        }
        Ok(Self::init(n_x, n_u, hidden, seed))
    }

    /// Scaled-uniform fan-in init for the hidden layers; zero output layer.
    pub fn init(n_x: usize, n_u: usize, hidden: usize, seed: u64) -> Self {
        let layout = NndmLayout {
            n_in: n_x + n_u,
            n_x,
            h: hidden,
        };
        let mut params = vec![0.0; layout.len()];
        let fill = |range: Range<usize>, bound: f64, stream: u64, params: &mut Vec<f64>| {
            let mut rng = Rng::substream(seed, stream);
            for v in &mut params[range] {
                *v = rng.uniform(-bound, bound);
            }
        };
        let bound1 = 1.0 / (layout.n_in as f64).sqrt();
        fill(layout.w1(), bound1, 1, &mut params);
        fill(layout.b1(), bound1, 2, &mut params);
        let bound2 = 1.0 / (hidden as f64).sqrt();
        fill(layout.w2(), bound2, 3, &mut params);
        fill(layout.b2(), bound2, 4, &mut params);
        // w3, b3 stay zero: the untrained model predicts exactly 0
        NndmModel {
            n_x,
            n_u,
            hidden,
            params,
        }
    }

    /// One forward pass over a batch of (x, u) columns.
    fn forward(&self, x: &Matrix, u: &Matrix) -> NndmCache {
        let l = self.layout();
        let cols = x.cols();
        let mut input = Matrix::zeros(l.n_in, cols);
        input.data_mut()[..l.n_x * cols].copy_from_slice(x.data());
        if self.n_u > 0 {
            input.data_mut()[l.n_x * cols..].copy_from_slice(u.data());
        }
        let mut h1 = Matrix::zeros(l.h, cols);
        gemm(l.h, l.n_in, cols, 1.0, &self.params[l.w1()], input.data(), 0.0, h1.data_mut());
        apply_bias_relu(&mut h1, &self.params[l.b1()]);
        let mut h2 = Matrix::zeros(l.h, cols);
        gemm(l.h, l.h, cols, 1.0, &self.params[l.w2()], h1.data(), 0.0, h2.data_mut());
        apply_bias_relu(&mut h2, &self.params[l.b2()]);
        let mut out = Matrix::zeros(l.n_x, cols);
        gemm(l.n_x, l.h, cols, 1.0, &self.params[l.w3()], h2.data(), 0.0, out.data_mut());
        let b3 = &self.params[l.b3()];
        for i in 0..l.n_x {
            let bias = b3[i];
            for v in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *v += bias;
            }
        }
        NndmCache { input, h1, h2, out }
    }

    /// Backprop `d_out` through one forward pass; accumulates parameter
    /// gradients and returns the gradient with respect to the state input.
    fn backward(&self, cache: &NndmCache, d_out: &Matrix, grads: &mut [f64]) -> Matrix {
        let l = self.layout();
        let cols = cache.input.cols();
        gemm_nt(l.n_x, cols, l.h, 1.0, d_out.data(), cache.h2.data(), 1.0, &mut grads[l.w3()]);
        for i in 0..l.n_x {
            grads[l.b3()][i] += d_out.row(i).iter().sum::<f64>();
        }
        let mut d_h2 = Matrix::zeros(l.h, cols);
        gemm_tn(l.h, l.n_x, cols, 1.0, &self.params[l.w3()], d_out.data(), 0.0, d_h2.data_mut());
        relu_mask(&mut d_h2, &cache.h2);
        gemm_nt(l.h, cols, l.h, 1.0, d_h2.data(), cache.h1.data(), 1.0, &mut grads[l.w2()]);
        for i in 0..l.h {
            grads[l.b2()][i] += d_h2.row(i).iter().sum::<f64>();
        }
        let mut d_h1 = Matrix::zeros(l.h, cols);
        gemm_tn(l.h, l.h, cols, 1.0, &self.params[l.w2()], d_h2.data(), 0.0, d_h1.data_mut());
        relu_mask(&mut d_h1, &cache.h1);
        gemm_nt(l.h, cols, l.n_in, 1.0, d_h1.data(), cache.input.data(), 1.0, &mut grads[l.w1()]);
        for i in 0..l.h {
            grads[l.b1()][i] += d_h1.row(i).iter().sum::<f64>();
        }
        let mut d_in = Matrix::zeros(l.n_in, cols);
        gemm_tn(l.n_in, l.h, cols, 1.0, &self.params[l.w1()], d_h1.data(), 0.0, d_in.data_mut());
        // only the state part feeds back through the rollout
        let mut d_x = Matrix::zeros(l.n_x, cols);
        d_x.data_mut().copy_from_slice(&d_in.data()[..l.n_x * cols]);
        d_x
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": "koopman-lab/nndm",
            "version": 1,
            "n_x": self.n_x,
            "n_u": self.n_u,
            "hidden": self.hidden,
        });
        io::write_container(path, header, &[("params", &self.params)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = io::read_container(path)?;
        if io::require_field(&header, "format")? != "koopman-lab/nndm" {
            return Err(Error::Format("not an nndm model file".into()));
        }
        let n_x = io::require_field(&header, "n_x")?.as_u64().unwrap_or(0) as usize;
        let n_u = io::require_field(&header, "n_u")?.as_u64().unwrap_or(0) as usize;
        let hidden = io::require_field(&header, "hidden")?.as_u64().unwrap_or(0) as usize;
        let params = io::find_block(&blocks, "params")?.to_vec();
        let expect = mlp_param_count(n_x, n_u, hidden);
        if params.len() != expect {
            return Err(Error::Format(format!(
                "param block length {} does not match dims (expected {expect})",
                params.len()
            )));
        }
        Ok(NndmModel {
            n_x,
            n_u,
            hidden,
            params,
        })
    }
}

fn apply_bias_relu(m: &mut Matrix, bias: &[f64]) {
    let cols = m.cols();
    for i in 0..m.rows() {
        let b = bias[i];
        for v in &mut m.data_mut()[i * cols..(i + 1) * cols] {
            *v = (*v + b).max(0.0);
        }
    }
}

fn relu_mask(d: &mut Matrix, activ: &Matrix) {
    for (dv, &a) in d.data_mut().iter_mut().zip(activ.data()) {
        if a <= 0.0 {
            *dv = 0.0;
        }
    }
}

/// One-step prediction.
pub fn nndm_step(model: &NndmModel, x: &[f64], u: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), model.n_x);
    assert_eq!(u.len(), model.n_u);
    let xm = Matrix::from_vec(model.n_x, 1, x.to_vec()).unwrap();
    let um = Matrix::from_vec(model.n_u, 1, u.to_vec()).unwrap();
    model.forward(&xm, &um).out.into_vec()
}

/// Discounted multi-step rollout MSE of a batch and its gradient (BPTT).
pub fn nndm_loss_and_grads(
    model: &NndmModel,
    windows: &[&Trajectory],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let nw = windows.len();
    if nw == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let t_hor = cfg.t;
    let (n_x, n_u) = (model.n_x, model.n_u);
    let w_norm = cfg.w_norm();
    let layout = model.layout();

    // rollout: xhat_0 = x_0, xhat_{k+1} = mlp(xhat_k, u_k)
    let mut caches: Vec<NndmCache> = Vec::with_capacity(t_hor);
    let mut xhat = Matrix::from_fn(n_x, nw, |i, w| windows[w].states[0][i]);
    let mut errors: Vec<Matrix> = Vec::with_capacity(t_hor);
    let mut loss = 0.0;
    let mut blowup = false;
    for k in 0..t_hor {
        let u = Matrix::from_fn(n_u, nw, |i, w| windows[w].controls[k][i]);
        let cache = model.forward(&xhat, &u);
        xhat = cache.out.clone();
        if !xhat.is_finite() || xhat.max_abs() > BLOWUP_NORM {
            blowup = true;
            break;
        }
        let e = Matrix::from_fn(n_x, nw, |i, w| xhat.data()[i * nw + w] - windows[w].states[k + 1][i]);
        loss += cfg.beta.powi((k + 1) as i32) * e.data().iter().map(|v| v * v).sum::<f64>();
        errors.push(e);
        caches.push(cache);
    }
    if blowup {
        return Ok((LOSS_CLIP, vec![0.0; layout.len()]));
    }
    loss /= w_norm * nw as f64;

    let mut grads = vec![0.0; layout.len()];
    let mut d_next = Matrix::zeros(n_x, nw);
    for k in (0..t_hor).rev() {
        let c_k = 2.0 * cfg.beta.powi((k + 1) as i32) / (w_norm * nw as f64);
        let mut d_out = d_next;
        for (dv, &e) in d_out.data_mut().iter_mut().zip(errors[k].data()) {
            *dv += c_k * e;
        }
        d_next = model.backward(&caches[k], &d_out, &mut grads);
    }
    Ok((loss, grads))
}

/// Undiscounted multi-step test error, mirroring `eval_test_eps`.
pub fn nndm_eval_eps(model: &NndmModel, data: &Dataset, t: usize) -> Result<f64> {
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
        let (l, _) = nndm_loss_and_grads(model, &[w], &cfg)?;
        total += l;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("no test windows long enough for horizon".into()));
    }
    Ok(total / count as f64)
}

/// Same training loop as `train`, over the parameter-matched MLP.
pub fn train_nndm(data: &Dataset, cfg: &TrainConfig) -> Result<(NndmModel, TrainReport)> {
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
    let mut model = NndmModel::init_matched(data.env.n_x, data.env.n_u, cfg.n_mult, cfg.seed)?;
    let mut adam = AdamState::new(model.params.len(), cfg.lr);
    let mut shuffle_rng = Rng::substream(cfg.seed, 100);
    let decay_epoch = ((cfg.epochs as f64) * 0.8).ceil() as usize;

    let mut report = TrainReport {
        epoch_pred: Vec::with_capacity(cfg.epochs),
        epoch_cov: Vec::new(),
        epoch_ctrl: Vec::new(),
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
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<_> = chunk.iter().map(|&i| windows[i]).collect();
            let (loss, grads) = nndm_loss_and_grads(&model, &batch, cfg)?;
            let (new_params, new_state) = adam_step(&model.params, &grads, &adam)?;
            model.params = new_params;
            adam = new_state;
            report.steps += 1;
            sum += loss;
            n_batches += 1;
            if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                capped = true;
                break;
            }
        }
        let mean = sum / n_batches.max(1) as f64;
        report.epoch_pred.push(mean);
        if mean > LOSS_CLIP * 0.999 {
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

    report.eps_test = nndm_eval_eps(&model, data, cfg.t)?;
    report.wall_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, EnvSpec};

    #[test]
    fn parameter_count_within_two_percent() {
        for (n_x, n_u, n_mult) in [(2, 1, 4), (3, 0, 8), (4, 2, 2), (3, 0, 16)] {
            let m = NndmModel::init_matched(n_x, n_u, n_mult, 0).unwrap();
            let target = Layout::new(n_x, n_u, n_mult).len();
            let rel = m.param_count().abs_diff(target) as f64 / target as f64;
            assert!(rel <= 0.02, "({n_x},{n_u},{n_mult}): rel {rel}");
        }
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let m = NndmModel::init(2, 1, 32, 7);
        let out = nndm_step(&m, &[0.4, -0.9], &[1.0]);
        assert_eq!(out, vec![0.0, 0.0]);
        // constant-zero predictor: one-step loss equals mean squared target
        let w = Trajectory {
            states: vec![vec![1.0, 0.0], vec![3.0, 4.0]],
            controls: vec![vec![0.0]],
        };
        let cfg = TrainConfig {
            t: 1,
            beta: 1.0,
            ..TrainConfig::default()
        };
        let (l, _) = nndm_loss_and_grads(&m, &[&w], &cfg).unwrap();
        assert!((l - 25.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = NndmModel::init(1, 1, 6, 3);
        // give the zero output layer nonzero values so gradients flow
        let mut model = model;
        let mut rng = Rng::new(5);
        let l = model.layout();
        for v in &mut model.params[l.w3().start..l.b3().end] {
            *v = rng.uniform(-0.5, 0.5);
        }
        let w = Trajectory {
            states: vec![vec![0.3], vec![-0.2], vec![0.5]],
            controls: vec![vec![0.7], vec![-0.4]],
        };
        let cfg = TrainConfig {
            t: 2,
            beta: 0.9,
            ..TrainConfig::default()
        };
        let (_, grads) = nndm_loss_and_grads(&model, &[&w], &cfg).unwrap();
        let mut rng2 = Rng::new(11);
        for _ in 0..20 {
            let idx = rng2.range_usize(model.params.len());
            let h = 1e-6;
            let mut mp = model.clone();
            mp.params[idx] += h;
            let (lp, _) = nndm_loss_and_grads(&mp, &[&w], &cfg).unwrap();
            let mut mm = model.clone();
            mm.params[idx] -= h;
            let (lm, _) = nndm_loss_and_grads(&mm, &[&w], &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(grads[idx].abs()).max(1e-6);
            assert!(
                ((fd - grads[idx]).abs() / scale) < 1e-4,
                "idx {idx}: fd {fd} vs {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn deterministic_training() {
        let data = generate_dataset(&EnvSpec::damped_pendulum(), 20, 3, 8).unwrap();
        let cfg = TrainConfig {
            t: 3,
            epochs: 2,
            batch: 8,
            n_mult: 1,
            ..TrainConfig::default()
        };
        let (m1, r1) = train_nndm(&data, &cfg).unwrap();
        let (m2, r2) = train_nndm(&data, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.eps_test.to_bits(), r2.eps_test.to_bits());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nndm.klb");
        let m = NndmModel::init(2, 1, 16, 4);
        m.save(&p).unwrap();
        let back = NndmModel::load(&p).unwrap();
        assert_eq!(m, back);
    }
}
