//! Latent linear MPC: condensation of the finite-horizon tracking problem
//! to a box-constrained QP, an accelerated projected-gradient solver with
//! adaptive restart, the receding-horizon loop, and the random-shooting
//! baseline controller.

use crate::edmd::EdmdModel;
use crate::error::{Error, Result};
use crate::net::{nndm_step, KoopmanModel, NndmModel};
use crate::numerics::{gemm, gemm_tn, Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Anything that embeds a state and advances it with latent linear dynamics.
pub trait LatentModel {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn encode_state(&self, x: &[f64]) -> Vec<f64>;
    fn a_mat(&self) -> Matrix;
    fn b_mat(&self) -> Matrix;
    /// Latent coordinates holding the physical state (the read-out P).
    fn state_coords(&self) -> Vec<usize>;
}

impl LatentModel for KoopmanModel {
    fn n_x(&self) -> usize {
        self.n_x
    }
    fn n_u(&self) -> usize {
        self.n_u
    }
    fn latent_dim(&self) -> usize {
        self.n()
    }
    fn encode_state(&self, x: &[f64]) -> Vec<f64> {
        self.encode(x)
    }
    fn a_mat(&self) -> Matrix {
        self.a_matrix()
    }
    fn b_mat(&self) -> Matrix {
        self.b_matrix()
    }
    fn state_coords(&self) -> Vec<usize> {
        (0..self.n_x).collect()
    }
}

impl LatentModel for EdmdModel {
    fn n_x(&self) -> usize {
        self.dictionary.n_x()
    }
    fn n_u(&self) -> usize {
        self.n_u
    }
    fn latent_dim(&self) -> usize {
        self.dictionary.n()
    }
    fn encode_state(&self, x: &[f64]) -> Vec<f64> {
        self.dictionary.lift(x)
    }
    fn a_mat(&self) -> Matrix {
        self.a()
    }
    fn b_mat(&self) -> Matrix {
        self.b()
    }
    fn state_coords(&self) -> Vec<usize> {
        self.dictionary.state_coords()
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub h: usize,
    pub q: Matrix,
    pub r: Matrix,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl MpcConfig {
    /// Q = I, R = 0, symmetric box from the given bound.
    pub fn new(h: usize, n_x: usize, u_min: Vec<f64>, u_max: Vec<f64>) -> Self {
        let n_u = u_min.len();
        MpcConfig {
            h,
            q: Matrix::identity(n_x),
            r: Matrix::zeros(n_u, n_u),
            u_min,
            u_max,
            tol: 1e-8,
            max_iters: 5000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(Error::Config("mpc horizon must be >= 1".into()));
        }
        if self.u_min.len() != self.u_max.len() {
            return Err(Error::Config("u_min/u_max lengths differ".into()));
        }
        for (lo, hi) in self.u_min.iter().zip(&self.u_max) {
            if lo > hi {
                return Err(Error::Config("u_min must be <= u_max".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub hess: Matrix,
    pub lin: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u: Vec<f64>,
    pub kkt_residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Eliminate the latent states: stack x_{t+k} = P(A^k z_t + sum_j A^{k-1-j} B u_j)
/// into cost(U) = U' (Hess/2) U + lin' U + const.
pub fn condense<M: LatentModel + ?Sized>(
    model: &M,
    x: &[f64],
    reference: &[Vec<f64>],
    cfg: &MpcConfig,
) -> Result<MpcProblem> {
    cfg.validate()?;
    if reference.len() < cfg.h {
        return Err(Error::Config(format!(
            "reference window has {} entries, horizon is {}",
            reference.len(),
            cfg.h
        )));
    }
    let (n_x, n_u, h) = (model.n_x(), model.n_u(), cfg.h);
    let a = model.a_mat();
    let b = model.b_mat();
    let coords = model.state_coords();
    let dim = h * n_u;

    // row-block k of M is P S_k; d holds the free-response offsets P A^k z - ref
    let mut m_mat = Matrix::zeros(h * n_x, dim);
    let mut d = vec![0.0; h * n_x];
    let mut free = model.encode_state(x);
    let mut s_blocks: Vec<Matrix> = Vec::with_capacity(h);
    for k in 0..h {
        for s in s_blocks.iter_mut() {
            *s = a.matmul(s);
        }
        s_blocks.push(b.clone());
        free = a.matvec(&free);
        for (i, &ci) in coords.iter().enumerate() {
            d[k * n_x + i] = free[ci] - reference[k][i];
        }
        for (j, s) in s_blocks.iter().enumerate() {
            // s_blocks[j] was pushed at step j and is now A^{k-j} B: it
            // multiplies u_j
            let col0 = j * n_u;
            for (i, &ci) in coords.iter().enumerate() {
                for c in 0..n_u {
                    m_mat[(k * n_x + i, col0 + c)] = s[(ci, c)];
                }
            }
        }
    }

    // QM = blockdiag(Q) * M and Qd likewise
    let mut qm = Matrix::zeros(h * n_x, dim);
    let mut qd = vec![0.0; h * n_x];
    for k in 0..h {
        for i in 0..n_x {
            for j in 0..n_x {
                let qij = cfg.q[(i, j)];
                if qij == 0.0 {
                    continue;
                }
                qd[k * n_x + i] += qij * d[k * n_x + j];
                for c in 0..dim {
                    qm[(k * n_x + i, c)] += qij * m_mat[(k * n_x + j, c)];
                }
            }
        }
    }

    let mut hess = Matrix::zeros(dim, dim);
    gemm_tn(dim, h * n_x, dim, 2.0, m_mat.data(), qm.data(), 0.0, hess.data_mut());
    for k in 0..h {
        for i in 0..n_u {
            for j in 0..n_u {
                hess[(k * n_u + i, k * n_u + j)] += 2.0 * cfg.r[(i, j)];
            }
        }
    }
    // symmetrize accumulation noise
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (hess[(i, j)] + hess[(j, i)]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let mut lin = vec![0.0; dim];
    for c in 0..dim {
        let mut acc = 0.0;
        for rix in 0..h * n_x {
            acc += m_mat[(rix, c)] * qd[rix];
        }
        lin[c] = 2.0 * acc;
    }
    let mut lo = Vec::with_capacity(dim);
    let mut hi = Vec::with_capacity(dim);
    for _ in 0..h {
        lo.extend_from_slice(&cfg.u_min);
        hi.extend_from_slice(&cfg.u_max);
    }
    Ok(MpcProblem {
        hess,
        lin,
        lo,
        hi,
        tol: cfg.tol,
        max_iters: cfg.max_iters,
    })
}

/// Direct rollout evaluation of the tracking cost; the condensation oracle.
pub fn rollout_cost<M: LatentModel + ?Sized>(
    model: &M,
    x: &[f64],
    reference: &[Vec<f64>],
    cfg: &MpcConfig,
    u_seq: &[f64],
) -> f64 {
    let (n_x, n_u, h) = (model.n_x(), model.n_u(), cfg.h);
    let a = model.a_mat();
    let b = model.b_mat();
    let coords = model.state_coords();
    let mut z = model.encode_state(x);
    let mut cost = 0.0;
    for k in 0..h {
        let u = &u_seq[k * n_u..(k + 1) * n_u];
        let mut next = a.matvec(&z);
        for (nv, bv) in next.iter_mut().zip(b.matvec(u)) {
            *nv += bv;
        }
        z = next;
        let e: Vec<f64> = coords
            .iter()
            .enumerate()
            .map(|(i, &ci)| z[ci] - reference[k][i])
            .collect();
        for i in 0..n_x {
            for j in 0..n_x {
                cost += e[i] * cfg.q[(i, j)] * e[j];
            }
        }
        for i in 0..n_u {
            for j in 0..n_u {
                cost += u[i] * cfg.r[(i, j)] * u[j];
            }
        }
    }
    cost
}

fn proj_box(v: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..v.len() {
        v[i] = v[i].clamp(lo[i], hi[i]);
    }
}

fn kkt_residual(p: &MpcProblem, u: &[f64]) -> f64 {
    let dim = u.len();
    let mut step = vec![0.0; dim];
    gemm(dim, dim, 1, 1.0, p.hess.data(), u, 0.0, &mut step);
    for i in 0..dim {
        step[i] = u[i] - (step[i] + p.lin[i]);
    }
    proj_box(&mut step, &p.lo, &p.hi);
    let mut worst = 0.0_f64;
    for i in 0..dim {
        worst = worst.max((u[i] - step[i]).abs());
    }
    worst
}

/// Accelerated projected gradient (FISTA) with adaptive restart.
pub fn solve_box_qp(p: &MpcProblem) -> MpcSolution {
    let dim = p.lin.len();
    if dim == 0 {
        return MpcSolution {
            u: vec![],
            kkt_residual: 0.0,
            iters: 0,
            converged: true,
        };
    }
    // Lipschitz constant from 50 power-iteration sweeps
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut l_max = 0.0;
    for _ in 0..50 {
        let mut w = vec![0.0; dim];
        gemm(dim, dim, 1, 1.0, p.hess.data(), &v, 0.0, &mut w);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            l_max = 0.0;
            break;
        }
        l_max = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    if l_max <= 1e-300 {
        // degenerate quadratic (Hess ~ 0): convention U = proj(0)
        let mut u = vec![0.0; dim];
        proj_box(&mut u, &p.lo, &p.hi);
        let kkt = kkt_residual(p, &u);
        return MpcSolution {
            u,
            kkt_residual: kkt,
            iters: 0,
            converged: true,
        };
    }
    let step = 1.0 / (l_max * 1.01);

    let mut u = vec![0.0; dim];
    proj_box(&mut u, &p.lo, &p.hi);
    let mut y = u.clone();
    let mut t = 1.0_f64;
    let mut iters = 0;
    let mut kkt = kkt_residual(p, &u);
    while kkt > p.tol && iters < p.max_iters {
        let mut grad = p.lin.clone();
        gemm(dim, dim, 1, 1.0, p.hess.data(), &y, 1.0, &mut grad);
        let mut u_next = vec![0.0; dim];
        for i in 0..dim {
            u_next[i] = y[i] - step * grad[i];
        }
        proj_box(&mut u_next, &p.lo, &p.hi);
        // adaptive restart on the gradient-mapping momentum test
        let restart: f64 = (0..dim).map(|i| (y[i] - u_next[i]) * (u_next[i] - u[i])).sum();
        if restart > 0.0 {
            t = 1.0;
            y = u_next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            for i in 0..dim {
                y[i] = u_next[i] + ((t - 1.0) / t_next) * (u_next[i] - u[i]);
            }
            t = t_next;
        }
        u = u_next;
        iters += 1;
        kkt = kkt_residual(p, &u);
    }
    MpcSolution {
        u,
        kkt_residual: kkt,
        iters,
        converged: kkt <= p.tol,
    }
}

/// Receding-horizon step: first control block of the condensed QP solution.
pub fn mpc_step<M: LatentModel + ?Sized>(
    model: &M,
    x: &[f64],
    reference: &[Vec<f64>],
    cfg: &MpcConfig,
) -> Result<(Vec<f64>, MpcSolution)> {
    let problem = condense(model, x, reference, cfg)?;
    let sol = solve_box_qp(&problem);
    let u = sol.u[..model.n_u()].to_vec();
    Ok((u, sol))
}

/// Sample control sequences in the box, roll each through the NNDM, return
/// the head of the cheapest (Q = I, R = 0 cost).
pub fn random_shooting_control(
    nndm: &NndmModel,
    x: &[f64],
    reference: &[Vec<f64>],
    h: usize,
    n_samples: usize,
    u_min: &[f64],
    u_max: &[f64],
    seed: u64,
) -> Vec<f64> {
    assert!(n_samples >= 1 && h >= 1 && reference.len() >= h);
    let n_u = nndm.n_u;
    let mut rng = Rng::new(seed);
    let mut best_cost = f64::INFINITY;
    let mut best_head = vec![0.0; n_u];
    for _ in 0..n_samples {
        let seq: Vec<Vec<f64>> = (0..h)
            .map(|_| (0..n_u).map(|i| rng.uniform(u_min[i], u_max[i])).collect())
            .collect();
        let mut cost = 0.0;
        let mut xk = x.to_vec();
        for k in 0..h {
            xk = nndm_step(nndm, &xk, &seq[k]);
            cost += xk
                .iter()
                .zip(&reference[k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            if !cost.is_finite() {
                cost = f64::INFINITY;
                break;
            }
        }
        if cost < best_cost {
            best_cost = cost;
            best_head = seq[0].clone();
        }
    }
    best_head
}

/// One control decision per step; reports a KKT residual when applicable.
pub trait Controller {
    fn act(&mut self, x: &[f64], ref_window: &[Vec<f64>]) -> Result<(Vec<f64>, f64)>;
    fn horizon(&self) -> usize;
}

pub struct MpcController<'a, M: LatentModel + ?Sized> {
    pub model: &'a M,
    pub cfg: MpcConfig,
}

impl<M: LatentModel + ?Sized> Controller for MpcController<'_, M> {
    fn act(&mut self, x: &[f64], ref_window: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        let (u, sol) = mpc_step(self.model, x, ref_window, &self.cfg)?;
        Ok((u, sol.kkt_residual))
    }
    fn horizon(&self) -> usize {
        self.cfg.h
    }
}

pub struct RandomShootingController<'a> {
    pub nndm: &'a NndmModel,
    pub h: usize,
    pub n_samples: usize,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub seed: u64,
    step: u64,
}

impl<'a> RandomShootingController<'a> {
    pub fn new(nndm: &'a NndmModel, h: usize, n_samples: usize, u_min: Vec<f64>, u_max: Vec<f64>, seed: u64) -> Self {
        RandomShootingController {
            nndm,
            h,
            n_samples,
            u_min,
            u_max,
            seed,
            step: 0,
        }
    }
}

impl Controller for RandomShootingController<'_> {
    fn act(&mut self, x: &[f64], ref_window: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        let per_step_seed = self.seed.wrapping_add(self.step.wrapping_mul(0x9e3779b97f4a7c15));
        self.step += 1;
        let u = random_shooting_control(
            self.nndm,
            x,
            ref_window,
            self.h,
            self.n_samples,
            &self.u_min,
            &self.u_max,
            per_step_seed,
        );
        Ok((u, f64::NAN))
    }
    fn horizon(&self) -> usize {
        self.h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
    pub errors: Vec<f64>,
    pub kkt_residuals: Vec<f64>,
    /// Mean per-step tracking error over the realized episode.
    pub tracking_error: f64,
    pub survival_steps: usize,
    pub truncated: bool,
}

impl ClosedLoopResult {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "t,x,u,ref,error,kkt_residual")?;
        for t in 0..self.controls.len() {
            let join = |v: &[f64]| {
                v.iter()
                    .map(|x| format!("{x}"))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            writeln!(
                f,
                "{},{},{},{},{},{}",
                t,
                join(&self.states[t + 1]),
                join(&self.controls[t]),
                join(&self.references[t]),
                self.errors[t],
                self.kkt_residuals[t]
            )?;
        }
        Ok(())
    }
}

/// Iterate the true step map with the controller; the reference is padded by
/// holding its final value so every window has full horizon length.
pub fn run_closed_loop(
    env_step: &dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    controller: &mut dyn Controller,
    x0: &[f64],
    reference: &[Vec<f64>],
    steps: usize,
    fail_threshold: f64,
) -> Result<ClosedLoopResult> {
    if reference.is_empty() {
        return Err(Error::Config("empty reference".into()));
    }
    let h = controller.horizon();
    let pad = reference.last().unwrap().clone();
    let ref_at = |t: usize| -> &Vec<f64> { reference.get(t).unwrap_or(&pad) };

    let mut result = ClosedLoopResult {
        states: vec![x0.to_vec()],
        controls: Vec::with_capacity(steps),
        references: Vec::with_capacity(steps),
        errors: Vec::with_capacity(steps),
        kkt_residuals: Vec::with_capacity(steps),
        tracking_error: 0.0,
        survival_steps: steps,
        truncated: false,
    };
    let mut x = x0.to_vec();
    let mut survived = steps;
    let mut failed = false;
    for t in 0..steps {
        let window: Vec<Vec<f64>> = (0..h).map(|k| ref_at(t + k).clone()).collect();
        let (u, kkt) = controller.act(&x, &window)?;
        let next = match env_step(&x, &u) {
            Ok(v) if v.iter().all(|c| c.is_finite()) => v,
            _ => {
                result.truncated = true;
                break;
            }
        };
        x = next;
        let err = x
            .iter()
            .zip(ref_at(t))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !failed && err > fail_threshold {
            survived = t;
            failed = true;
        }
        result.states.push(x.clone());
        result.controls.push(u);
        result.references.push(ref_at(t).clone());
        result.errors.push(err);
        result.kkt_residuals.push(kkt);
    }
    result.survival_steps = survived.min(result.controls.len());
    result.tracking_error = if result.errors.is_empty() {
        0.0
    } else {
        result.errors.iter().sum::<f64>() / result.errors.len() as f64
    };
    Ok(result)
}

/// Sinusoidal joint reference for pendulum tracking episodes:
/// theta_ref(t) = 0.8 sin(0.5 t), omega_ref its derivative.
pub fn pendulum_reference(steps: usize, h: usize, dt: f64) -> Vec<Vec<f64>> {
    (1..=steps + h)
        .map(|k| {
            let t = k as f64 * dt;
            vec![0.8 * (0.5 * t).sin(), 0.4 * (0.5 * t).cos()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// psi = 0 latent model with hand-set (A, B): z = [x; 0].
    fn rigged(n_x: usize, n_u: usize, a: Matrix, b: Matrix) -> KoopmanModel {
        let mut m = KoopmanModel::init(n_x, n_u, 1, 0).unwrap();
        m.zero_features();
        m.set_a(&a);
        m.set_b(&b);
        m
    }

    fn scalar_integrator() -> KoopmanModel {
        rigged(
            1,
            1,
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
        )
    }

    #[test]
    fn condense_hand_example() {
        let m = scalar_integrator();
        let cfg = MpcConfig::new(1, 1, vec![-2.0], vec![2.0]);
        let p = condense(&m, &[1.0], &[vec![0.0]], &cfg).unwrap();
        assert!((p.hess[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((p.lin[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn condense_unactuated_degenerate() {
        let m = rigged(
            1,
            1,
            Matrix::from_rows(&[vec![0.9, 0.0], vec![0.0, 0.0]]).unwrap(),
            Matrix::zeros(2, 1),
        );
        let cfg = MpcConfig::new(3, 1, vec![-1.0], vec![1.0]);
        let p = condense(&m, &[1.0], &vec![vec![0.0]; 3], &cfg).unwrap();
        assert!(p.hess.max_abs() < 1e-15);
        assert!(p.lin.iter().all(|v| v.abs() < 1e-15));
        let sol = solve_box_qp(&p);
        assert_eq!(sol.u, vec![0.0; 3]);
    }

    #[test]
    fn condensed_cost_matches_rollout() {
        let model = KoopmanModel::init(2, 1, 1, 9).unwrap();
        let cfg = MpcConfig::new(4, 2, vec![-1.0], vec![1.0]);
        let x = [0.3, -0.5];
        let reference: Vec<Vec<f64>> = (0..4).map(|k| vec![0.1 * k as f64, -0.2]).collect();
        let p = condense(&model, &x, &reference, &cfg).unwrap();
        let base = rollout_cost(&model, &x, &reference, &cfg, &vec![0.0; 4]);
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let u: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let direct = rollout_cost(&model, &x, &reference, &cfg, &u);
            // quadratic form: 0.5 u'Hu + lin'u + const
            let mut hu = vec![0.0; 4];
            gemm(4, 4, 1, 1.0, p.hess.data(), &u, 0.0, &mut hu);
            let quad = 0.5 * u.iter().zip(&hu).map(|(a, b)| a * b).sum::<f64>()
                + p.lin.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
                + base;
            assert!((quad - direct).abs() < 1e-9, "quad {quad} direct {direct}");
        }
    }

    #[test]
    fn qp_interior_optimum() {
        let p = MpcProblem {
            hess: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            lin: vec![2.0],
            lo: vec![-2.0],
            hi: vec![2.0],
            tol: 1e-8,
            max_iters: 5000,
        };
        let sol = solve_box_qp(&p);
        assert!((sol.u[0] + 1.0).abs() < 1e-8);
        assert!(sol.converged);
    }

    #[test]
    fn qp_active_bound() {
        let p = MpcProblem {
            hess: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            lin: vec![10.0],
            lo: vec![-2.0],
            hi: vec![2.0],
            tol: 1e-8,
            max_iters: 5000,
        };
        let sol = solve_box_qp(&p);
        assert!((sol.u[0] + 2.0).abs() < 1e-12);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn qp_matches_direct_solve_inactive_bounds() {
        let mut rng = Rng::new(12);
        for trial in 0..5 {
            let g = Matrix::from_fn(6, 6, |_, _| rng.normal());
            let mut hess = Matrix::zeros(6, 6);
            gemm_tn(6, 6, 6, 1.0, g.data(), g.data(), 0.0, hess.data_mut());
            for i in 0..6 {
                hess[(i, i)] += 1.0;
            }
            let lin: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let p = MpcProblem {
                hess: hess.clone(),
                lin: lin.clone(),
                lo: vec![-100.0; 6],
                hi: vec![100.0; 6],
                tol: 1e-8,
                max_iters: 5000,
            };
            let sol = solve_box_qp(&p);
            let neg_lin = Matrix::from_vec(6, 1, lin.iter().map(|v| -v).collect()).unwrap();
            let direct = hess.solve_spd(&neg_lin).unwrap();
            for i in 0..6 {
                assert!(
                    (sol.u[i] - direct[(i, 0)]).abs() < 1e-6,
                    "trial {trial} coord {i}"
                );
            }
        }
    }

    #[test]
    fn mpc_deadbeat_scalar() {
        let m = scalar_integrator();
        let cfg = MpcConfig::new(1, 1, vec![-2.0], vec![2.0]);
        let (u, sol) = mpc_step(&m, &[1.0], &[vec![0.0]], &cfg).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-8, "u = {}", u[0]);
        assert!(sol.converged);
    }

    #[test]
    fn mpc_zero_when_ref_is_free_rollout() {
        let model = KoopmanModel::init(2, 1, 1, 4).unwrap();
        let cfg = MpcConfig::new(3, 2, vec![-1.0], vec![1.0]);
        let x = [0.2, -0.3];
        // reference = model's own unactuated rollout
        let a = model.a_matrix();
        let mut z = model.encode(&x);
        let mut reference = Vec::new();
        for _ in 0..3 {
            z = a.matvec(&z);
            reference.push(z[..2].to_vec());
        }
        let (u, _) = mpc_step(&model, &x, &reference, &cfg).unwrap();
        assert!(u[0].abs() < 1e-6, "u = {}", u[0]);
    }

    #[test]
    fn mpc_degenerate_box() {
        let m = scalar_integrator();
        let cfg = MpcConfig::new(2, 1, vec![0.0], vec![0.0]);
        let (u, _) = mpc_step(&m, &[1.0], &vec![vec![0.0]; 2], &cfg).unwrap();
        assert_eq!(u, vec![0.0]);
    }

    #[test]
    fn closed_loop_integrator_reaches_ref() {
        let m = scalar_integrator();
        let mut ctl = MpcController {
            model: &m,
            cfg: MpcConfig::new(1, 1, vec![-10.0], vec![10.0]),
        };
        let step = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0] + u[0]]) };
        let reference = vec![vec![2.0]; 10];
        let res = run_closed_loop(&step, &mut ctl, &[1.0], &reference, 8, f64::INFINITY).unwrap();
        assert!(res.errors[0] < 1e-7, "first-step error {}", res.errors[0]);
        assert!(res.errors.iter().skip(1).all(|e| *e < 1e-7));
        assert_eq!(res.survival_steps, 8);
    }

    #[test]
    fn closed_loop_at_fixed_point_zero_error() {
        let m = scalar_integrator();
        let mut ctl = MpcController {
            model: &m,
            cfg: MpcConfig::new(1, 1, vec![-1.0], vec![1.0]),
        };
        let step = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0] + u[0]]) };
        let reference = vec![vec![0.0]; 6];
        let res = run_closed_loop(&step, &mut ctl, &[0.0], &reference, 5, 0.5).unwrap();
        assert!(res.tracking_error < 1e-12);
        assert_eq!(res.survival_steps, 5);
    }

    #[test]
    fn survival_counts_first_violation() {
        struct Zero;
        impl Controller for Zero {
            fn act(&mut self, _x: &[f64], _r: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
                Ok((vec![0.0], f64::NAN))
            }
            fn horizon(&self) -> usize {
                1
            }
        }
        // diverging plant with zero controller
        let step = |x: &[f64], _u: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0] * 2.0]) };
        let reference = vec![vec![0.0]; 12];
        let mut ctl = Zero;
        let res = run_closed_loop(&step, &mut ctl, &[0.1], &reference, 10, 0.5).unwrap();
        // 0.2, 0.4, 0.8 -> first violation at t = 2
        assert_eq!(res.survival_steps, 2);
    }

    #[test]
    fn random_shooting_single_sample_deterministic() {
        let nndm = NndmModel::init(1, 1, 8, 3);
        let reference = vec![vec![0.0]; 2];
        let u1 = random_shooting_control(&nndm, &[0.5], &reference, 2, 1, &[-1.0], &[1.0], 9);
        let u2 = random_shooting_control(&nndm, &[0.5], &reference, 2, 1, &[-1.0], &[1.0], 9);
        assert_eq!(u1, u2);
        let u3 = random_shooting_control(&nndm, &[0.5], &reference, 2, 500, &[-1.0], &[1.0], 9);
        let u4 = random_shooting_control(&nndm, &[0.5], &reference, 2, 500, &[-1.0], &[1.0], 9);
        assert_eq!(u3, u4);
    }

    #[test]
    fn edmd_model_works_as_latent_model() {
        use crate::edmd::{edmd_fit, Dictionary};
        use crate::envs::{Dataset, EnvSpec, Trajectory};
        // x+ = x + u learned from exact data with the identity dictionary
        let mut rng = Rng::new(5);
        let windows: Vec<Trajectory> = (0..30)
            .map(|_| {
                let x = rng.uniform(-1.0, 1.0);
                let u = rng.uniform(-1.0, 1.0);
                Trajectory {
                    states: vec![vec![x], vec![x + u]],
                    controls: vec![vec![u]],
                }
            })
            .collect();
        let mut env = EnvSpec::damped_pendulum();
        env.n_x = 1;
        env.state_lo = vec![-1.0];
        env.state_hi = vec![1.0];
        env.u_bound = vec![1.0];
        let m = windows.len();
        let data = Dataset {
            train_idx: (0..windows.len()).collect(),
            test_idx: vec![],
            windows,
            env,
            seed: 0,
            m,
            t_win: 1,
        };
        let model = edmd_fit(&data, &Dictionary::identity(1), 0.0).unwrap();
        let cfg = MpcConfig::new(1, 1, vec![-2.0], vec![2.0]);
        let (u, _) = mpc_step(&model, &[1.0], &[vec![0.0]], &cfg).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-6);
    }
}
