//! The three-term training objective and its exact reverse-mode gradients:
//! discounted multi-step prediction error, centered batch-covariance
//! off-diagonal penalty, and ridge-pseudoinverse control recovery.
//!
//! Gradients flow through the latent rollout (BPTT over A, B), through the
//! batch covariance, and through B inside the pseudoinverse of the control
//! loss. Everything is batched column-wise: one matrix per window time step,
//! windows as columns.

use super::model::KoopmanModel;
use super::train::TrainConfig;
use crate::envs::Trajectory;
use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_nt, gemm_tn, Matrix};

const BLOWUP_NORM: f64 = 1e12;
pub const LOSS_CLIP: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub pred: f64,
    pub cov: f64,
    pub ctrl: f64,
    pub total: f64,
    pub blowup: bool,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Latent predictions z_{t+1..t+T}.
    pub z: Vec<Vec<f64>>,
    /// State read-outs x_{t+1..t+T} = P z.
    pub x: Vec<Vec<f64>>,
    pub blowup: bool,
}

/// Unroll the learned latent dynamics from one encoded state.
pub fn rollout_latent(model: &KoopmanModel, x0: &[f64], controls: &[Vec<f64>], horizon: usize) -> Rollout {
    assert!(horizon >= 1);
    let a = model.a_matrix();
    let b = model.b_matrix();
    let mut z = model.encode(x0);
    let mut out = Rollout {
        z: Vec::with_capacity(horizon),
        x: Vec::with_capacity(horizon),
        blowup: false,
    };
    for t in 0..horizon {
        let mut next = a.matvec(&z);
        if model.n_u > 0 {
            let u = controls.get(t).map(|u| u.as_slice()).unwrap_or(&[]);
            for (nv, bv) in next.iter_mut().zip(b.matvec(u)) {
                *nv += bv;
            }
        }
        z = next;
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            out.blowup = true;
            return out;
        }
        out.x.push(z[..model.n_x].to_vec());
        out.z.push(z.clone());
    }
    out
}

/// Discounted multi-step prediction loss of one window:
/// (1/W) sum_{tau=1..T} beta^tau ||xhat_tau - x_tau||^2.
pub fn loss_pred(model: &KoopmanModel, window: &Trajectory, cfg: &TrainConfig) -> Result<f64> {
    let t_hor = cfg.t;
    if window.states.len() < t_hor + 1 {
        return Err(Error::Config(format!(
            "window has {} states, need {}",
            window.states.len(),
            t_hor + 1
        )));
    }
    let roll = rollout_latent(model, &window.states[0], &window.controls, t_hor);
    if roll.blowup {
        return Ok(LOSS_CLIP);
    }
    let w_norm = cfg.w_norm();
    let mut total = 0.0;
    for k in 1..=t_hor {
        let err: f64 = roll.x[k - 1]
            .iter()
            .zip(&window.states[k])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += cfg.beta.powi(k as i32) * err;
    }
    Ok(total / w_norm)
}

/// Off-diagonal penalty of the centered batch covariance of `phi`
/// (features as rows, samples as columns): ||G - diag(G)||_F^2 / (n(n-1)).
pub fn loss_cov(phi: &Matrix) -> Result<f64> {
    let (g, _) = centered_covariance(phi)?;
    Ok(offdiag_sq_mean(&g))
}

fn centered_covariance(phi: &Matrix) -> Result<(Matrix, Matrix)> {
    let (n, b) = (phi.rows(), phi.cols());
    if b < 2 {
        return Err(Error::Config(format!("covariance needs >= 2 samples, got {b}")));
    }
    let mut centered = phi.clone();
    for i in 0..n {
        let mean = phi.row(i).iter().sum::<f64>() / b as f64;
        for v in &mut centered.data_mut()[i * b..(i + 1) * b] {
            *v -= mean;
        }
    }
    let mut g = Matrix::zeros(n, n);
    gemm_nt(
        n,
        b,
        n,
        1.0 / (b - 1) as f64,
        centered.data(),
        centered.data(),
        0.0,
        g.data_mut(),
    );
    Ok((g, centered))
}

fn offdiag_sq_mean(g: &Matrix) -> f64 {
    let n = g.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += g[(i, j)] * g[(i, j)];
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Control-recovery loss of one window: the discounted squared error of the
/// ridge-pseudoinverse estimate uhat = (B'B + eps_B I)^-1 B'(z_{tau+1} - A z_tau)
/// from encoded ground-truth states.
pub fn loss_ctrl(model: &KoopmanModel, window: &Trajectory, cfg: &TrainConfig) -> Result<f64> {
    if model.n_u == 0 {
        return Err(Error::Config("loss_ctrl needs n_u >= 1".into()));
    }
    let t_hor = cfg.t;
    if window.states.len() < t_hor + 1 {
        return Err(Error::Config("window shorter than horizon".into()));
    }
    let a = model.a_matrix();
    let b = model.b_matrix();
    let m_b = ridge_gram_inverse(&b, cfg.eps_b)?;
    let w_norm = cfg.w_norm();
    let z: Vec<Vec<f64>> = window.states[..=t_hor].iter().map(|x| model.encode(x)).collect();
    let mut total = 0.0;
    for tau in 0..t_hor {
        let az = a.matvec(&z[tau]);
        let r: Vec<f64> = z[tau + 1].iter().zip(&az).map(|(zp, az)| zp - az).collect();
        let btr = bt_vec(&b, &r);
        let uhat = m_b.matvec(&btr);
        let err: f64 = uhat
            .iter()
            .zip(&window.controls[tau])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += cfg.beta.powi(tau as i32) * err;
    }
    Ok(total / w_norm)
}

fn bt_vec(b: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b.cols()];
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            out[j] += b[(i, j)] * v[i];
        }
    }
    out
}

fn ridge_gram_inverse(b: &Matrix, eps_b: f64) -> Result<Matrix> {
    let n_u = b.cols();
    let mut s = Matrix::zeros(n_u, n_u);
    gemm_tn(n_u, b.rows(), n_u, 1.0, b.data(), b.data(), 0.0, s.data_mut());
    for i in 0..n_u {
        s[(i, i)] += eps_b;
    }
    s.solve_spd(&Matrix::identity(n_u))
}

/// Composite loss and its gradient over the full flat parameter vector.
pub fn total_loss_and_grads(
    model: &KoopmanModel,
    windows: &[&Trajectory],
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f64>)> {
    forward_backward(model, windows, cfg, true).map(|(p, g)| (p, g.unwrap()))
}

/// Forward-only evaluation of the composite loss on a batch.
pub fn total_loss(model: &KoopmanModel, windows: &[&Trajectory], cfg: &TrainConfig) -> Result<LossParts> {
    forward_backward(model, windows, cfg, false).map(|(p, _)| p)
}

fn forward_backward(
    model: &KoopmanModel,
    windows: &[&Trajectory],
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let nw = windows.len();
    if nw == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let t_hor = cfg.t;
    for (i, w) in windows.iter().enumerate() {
        if w.states.len() < t_hor + 1 {
            return Err(Error::Config(format!(
                "window {i} has {} states, horizon needs {}",
                w.states.len(),
                t_hor + 1
            )));
        }
    }
    let layout = model.layout();
    let (n, n_x, n_u) = (layout.n, layout.n_x, layout.n_u);
    let a = model.a_matrix();
    let b = model.b_matrix();
    let w_norm = cfg.w_norm();

    // encode ground-truth states, one matrix per window time step
    let caches: Vec<_> = (0..=t_hor)
        .map(|t| {
            let x = Matrix::from_fn(n_x, nw, |i, w| windows[w].states[t][i]);
            model.encode_batch(&x)
        })
        .collect();
    let controls: Vec<Matrix> = (0..t_hor)
        .map(|t| Matrix::from_fn(n_u, nw, |i, w| windows[w].controls[t][i]))
        .collect();

    // ---- prediction rollout --------------------------------------------
    let mut zh: Vec<Matrix> = Vec::with_capacity(t_hor + 1);
    zh.push(caches[0].z.clone());
    let mut blowup = false;
    for k in 1..=t_hor {
        let mut next = Matrix::zeros(n, nw);
        gemm(n, n, nw, 1.0, a.data(), zh[k - 1].data(), 0.0, next.data_mut());
        if n_u > 0 {
            gemm(n, n_u, nw, 1.0, b.data(), controls[k - 1].data(), 1.0, next.data_mut());
        }
        if !next.is_finite() || next.max_abs() > BLOWUP_NORM {
            blowup = true;
        }
        zh.push(next);
    }
    if blowup {
        let parts = LossParts {
            pred: LOSS_CLIP,
            cov: 0.0,
            ctrl: 0.0,
            total: LOSS_CLIP,
            blowup: true,
        };
        let grads = want_grads.then(|| vec![0.0; layout.len()]);
        return Ok((parts, grads));
    }

    let mut errors: Vec<Matrix> = Vec::with_capacity(t_hor);
    let mut l_pred = 0.0;
    for k in 1..=t_hor {
        let e = Matrix::from_fn(n_x, nw, |i, w| {
            zh[k].data()[i * nw + w] - caches[k].x.data()[i * nw + w]
        });
        l_pred += cfg.beta.powi(k as i32) * e.data().iter().map(|v| v * v).sum::<f64>();
        errors.push(e);
    }
    l_pred /= w_norm * nw as f64;

    // ---- covariance penalty over all encoded batch states ---------------
    let n_cols = nw * (t_hor + 1);
    let (l_cov, g_batch, centered) = if cfg.w_cov != 0.0 {
        let mut phi = Matrix::zeros(n, n_cols);
        for (t, c) in caches.iter().enumerate() {
            for i in 0..n {
                let dst = i * n_cols + t * nw;
                phi.data_mut()[dst..dst + nw].copy_from_slice(&c.z.data()[i * nw..(i + 1) * nw]);
            }
        }
        let (g, centered) = centered_covariance(&phi)?;
        (offdiag_sq_mean(&g), Some(g), Some(centered))
    } else {
        (0.0, None, None)
    };

    // ---- control recovery ----------------------------------------------
    let use_ctrl = cfg.w_ctrl != 0.0 && n_u > 0;
    let mut residuals: Vec<Matrix> = Vec::new();
    let mut uhats: Vec<Matrix> = Vec::new();
    let mut l_ctrl = 0.0;
    let m_b = if use_ctrl { Some(ridge_gram_inverse(&b, cfg.eps_b)?) } else { None };
    if let Some(m_b) = &m_b {
        for tau in 0..t_hor {
            let mut r = caches[tau + 1].z.clone();
            gemm(n, n, nw, -1.0, a.data(), caches[tau].z.data(), 1.0, r.data_mut());
            let mut btr = Matrix::zeros(n_u, nw);
            gemm_tn(n_u, n, nw, 1.0, b.data(), r.data(), 0.0, btr.data_mut());
            let uhat = m_b.matmul(&btr);
            let err: f64 = uhat
                .data()
                .iter()
                .zip(controls[tau].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            l_ctrl += cfg.beta.powi(tau as i32) * err;
            residuals.push(r);
            uhats.push(uhat);
        }
        l_ctrl /= w_norm * nw as f64;
    }

    let total = l_pred + cfg.w_cov * l_cov + cfg.w_ctrl * l_ctrl;
    if !total.is_finite() {
        let bad = errors
            .iter()
            .flat_map(|e| e.data())
            .position(|v| !v.is_finite())
            .map(|p| p % nw)
            .unwrap_or(0);
        return Err(Error::NonFinite(format!("loss on batch window {bad}")));
    }
    let clipped = total > LOSS_CLIP;
    let parts = LossParts {
        pred: l_pred,
        cov: l_cov,
        ctrl: l_ctrl,
        total: total.min(LOSS_CLIP),
        blowup: clipped,
    };
    if !want_grads {
        return Ok((parts, None));
    }
    if clipped {
        return Ok((parts, Some(vec![0.0; layout.len()])));
    }

    let mut grads = vec![0.0; layout.len()];
    let mut d_z: Vec<Matrix> = (0..=t_hor).map(|_| Matrix::zeros(n, nw)).collect();
    let mut d_a = Matrix::zeros(n, n);
    let mut d_b = Matrix::zeros(n, n_u);

    // prediction: adjoint recursion lam_k = direct_k + A^T lam_{k+1}
    let mut lam = Matrix::zeros(n, nw);
    for k in (1..=t_hor).rev() {
        let mut next = Matrix::zeros(n, nw);
        gemm_tn(n, n, nw, 1.0, a.data(), lam.data(), 0.0, next.data_mut());
        let c_k = 2.0 * cfg.beta.powi(k as i32) / (w_norm * nw as f64);
        for i in 0..n_x {
            for w in 0..nw {
                next.data_mut()[i * nw + w] += c_k * errors[k - 1].data()[i * nw + w];
            }
        }
        lam = next;
        gemm_nt(n, nw, n, 1.0, lam.data(), zh[k - 1].data(), 1.0, d_a.data_mut());
        if n_u > 0 {
            gemm_nt(n, nw, n_u, 1.0, lam.data(), controls[k - 1].data(), 1.0, d_b.data_mut());
        }
    }
    gemm_tn(n, n, nw, 1.0, a.data(), lam.data(), 1.0, d_z[0].data_mut());

    // covariance: dPhi_k = w_cov * (2/(b-1)) * M * centered_k, M = dL/dG
    if let (Some(g), Some(centered)) = (&g_batch, &centered) {
        let denom = (n * (n - 1)) as f64;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m[(i, j)] = 2.0 * g[(i, j)] / denom;
                }
            }
        }
        let scale = cfg.w_cov * 2.0 / (n_cols - 1) as f64;
        let mut d_phi = Matrix::zeros(n, n_cols);
        gemm(n, n, n_cols, scale, m.data(), centered.data(), 0.0, d_phi.data_mut());
        for t in 0..=t_hor {
            for i in 0..n {
                let src = i * n_cols + t * nw;
                for w in 0..nw {
                    d_z[t].data_mut()[i * nw + w] += d_phi.data()[src + w];
                }
            }
        }
    }

    // control: per step, e = 2 s (uhat - u), g = M_B e,
    // dB += (r - B uhat) g^T - B g uhat^T; dA -= (B g) z^T; dz propagates
    if let Some(m_b) = &m_b {
        for tau in 0..t_hor {
            let s = cfg.w_ctrl * 2.0 * cfg.beta.powi(tau as i32) / (w_norm * nw as f64);
            let e_hat = Matrix::from_fn(n_u, nw, |i, w| {
                s * (uhats[tau].data()[i * nw + w] - controls[tau].data()[i * nw + w])
            });
            let g_mat = m_b.matmul(&e_hat);
            let mut b_uhat = Matrix::zeros(n, nw);
            gemm(n, n_u, nw, 1.0, b.data(), uhats[tau].data(), 0.0, b_uhat.data_mut());
            let r_minus = residuals[tau].sub(&b_uhat);
            gemm_nt(n, nw, n_u, 1.0, r_minus.data(), g_mat.data(), 1.0, d_b.data_mut());
            let mut gu = Matrix::zeros(n_u, n_u);
            gemm_nt(n_u, nw, n_u, 1.0, g_mat.data(), uhats[tau].data(), 0.0, gu.data_mut());
            let bgu = b.matmul(&gu);
            d_b.add_scaled(-1.0, &bgu);

            let mut bg = Matrix::zeros(n, nw);
            gemm(n, n_u, nw, 1.0, b.data(), g_mat.data(), 0.0, bg.data_mut());
            gemm_nt(n, nw, n, -1.0, bg.data(), caches[tau].z.data(), 1.0, d_a.data_mut());
            // dz_tau -= A^T (B g); dz_{tau+1} += B g
            gemm_tn(n, n, nw, -1.0, a.data(), bg.data(), 1.0, d_z[tau].data_mut());
            d_z[tau + 1].add_scaled(1.0, &bg);
        }
    }

    for (cache, dz) in caches.iter().zip(&d_z) {
        model.encode_backward(cache, dz, &mut grads);
    }
    for (g, v) in grads[layout.a()].iter_mut().zip(d_a.data()) {
        *g += v;
    }
    for (g, v) in grads[layout.b()].iter_mut().zip(d_b.data()) {
        *g += v;
    }
    Ok((parts, Some(grads)))
}
