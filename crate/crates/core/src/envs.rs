//! Ground-truth dynamical systems and dataset generation via uniform
//! state-space sampling with randomized per-step controls.

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;

pub const TEST_TRANSITIONS: usize = 2048;
const RESAMPLE_CAP: usize = 100;
const STATE_SANITY_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Polynomial,
    DampedPendulum,
    DoublePendulum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_x: usize,
    pub n_u: usize,
    /// Step length in seconds; 0 for the discrete-time polynomial system.
    pub dt: f64,
    /// Polynomial system: max degree of the coupling term (>= 3).
    #[serde(default)]
    pub n_poly: usize,
    /// Polynomial system: shared coupling coefficient b_p.
    #[serde(default)]
    pub b_p: f64,
    /// Per-coordinate lower/upper bounds of the initial-state box.
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    /// Per-coordinate symmetric control bound |u_i| <= u_bound[i].
    pub u_bound: Vec<f64>,
}

impl EnvSpec {
    pub fn polynomial(n_poly: usize) -> Self {
        EnvSpec {
            kind: EnvKind::Polynomial,
            n_x: 3,
            n_u: 0,
            dt: 0.0,
            n_poly,
            b_p: 0.9,
            state_lo: vec![-1.0; 3],
            state_hi: vec![1.0; 3],
            u_bound: vec![],
        }
    }

    pub fn damped_pendulum() -> Self {
        use std::f64::consts::PI;
        EnvSpec {
            kind: EnvKind::DampedPendulum,
            n_x: 2,
            n_u: 1,
            dt: 0.02,
            n_poly: 0,
            b_p: 0.0,
            state_lo: vec![-PI, -4.0],
            state_hi: vec![PI, 4.0],
            u_bound: vec![2.0],
        }
    }

    pub fn double_pendulum() -> Self {
        use std::f64::consts::PI;
        EnvSpec {
            kind: EnvKind::DoublePendulum,
            n_x: 4,
            n_u: 2,
            dt: 0.01,
            n_poly: 0,
            b_p: 0.0,
            state_lo: vec![-PI, -PI, -2.0, -2.0],
            state_hi: vec![PI, PI, 2.0, 2.0],
            u_bound: vec![1.0, 1.0],
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::Polynomial => "polynomial",
            EnvKind::DampedPendulum => "damped-pendulum",
            EnvKind::DoublePendulum => "double-pendulum",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = match self.kind {
            EnvKind::Polynomial => (3, 0),
            EnvKind::DampedPendulum => (2, 1),
            EnvKind::DoublePendulum => (4, 2),
        };
        if (self.n_x, self.n_u) != expect {
            return Err(Error::Config(format!(
                "{}: expected (n_x, n_u) = {:?}, got ({}, {})",
                self.name(),
                expect,
                self.n_x,
                self.n_u
            )));
        }
        if self.kind != EnvKind::Polynomial && self.dt <= 0.0 {
            return Err(Error::Config("continuous-time env needs dt > 0".into()));
        }
        if self.kind == EnvKind::Polynomial && self.n_poly < 3 {
            return Err(Error::Config("polynomial env needs n_poly >= 3".into()));
        }
        if self.state_lo.len() != self.n_x || self.state_hi.len() != self.n_x {
            return Err(Error::Config("state box dims must match n_x".into()));
        }
        if self.u_bound.len() != self.n_u {
            return Err(Error::Config("u_bound dims must match n_u".into()));
        }
        Ok(())
    }

    /// One environment step under zero-order-hold control.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            EnvKind::Polynomial => Ok(poly_step(x, self)),
            EnvKind::DampedPendulum => rk4_step(|x, u| Ok(pendulum_deriv(x, u, self)), x, u, self.dt),
            EnvKind::DoublePendulum => {
                rk4_step(|x, u| double_pendulum_deriv(x, u, self), x, u, self.dt)
            }
        }
    }
}

/// Discrete polynomial map: (0.85 x1, 0.9 x2, 0.9 x3 + sum_p b_p x1^p).
pub fn poly_step(x: &[f64], spec: &EnvSpec) -> Vec<f64> {
    debug_assert_eq!(x.len(), 3);
    let mut coupling = 0.0;
    let mut x1p = 1.0;
    for _p in 1..=(spec.n_poly - 2) {
        x1p *= x[0];
        coupling += spec.b_p * x1p;
    }
    vec![0.85 * x[0], 0.90 * x[1], 0.90 * x[2] + coupling]
}

const PEND_G: f64 = 9.81;
const PEND_L: f64 = 1.0;
const PEND_M: f64 = 1.0;
const PEND_DAMP: f64 = 0.1;

/// Damped pendulum: (theta_dot, omega_dot) with viscous damping and torque input.
pub fn pendulum_deriv(x: &[f64], u: &[f64], _spec: &EnvSpec) -> Vec<f64> {
    let (theta, omega) = (x[0], x[1]);
    let torque = if u.is_empty() { 0.0 } else { u[0] };
    vec![
        omega,
        -(PEND_G / PEND_L) * theta.sin() - PEND_DAMP * omega + torque / (PEND_M * PEND_L * PEND_L),
    ]
}

const DP_M1: f64 = 1.0;
const DP_M2: f64 = 1.0;
const DP_L1: f64 = 1.0;
const DP_L2: f64 = 1.0;
const DP_DAMP: f64 = 0.05;

/// Two-link point-mass pendulum, angles measured from the downward vertical,
/// per-joint viscous damping and torque.
pub fn double_pendulum_deriv(x: &[f64], u: &[f64], _spec: &EnvSpec) -> Result<Vec<f64>> {
    let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
    let (tau1, tau2) = match u.len() {
        0 => (0.0, 0.0),
        1 => (u[0], 0.0),
        _ => (u[0], u[1]),
    };
    let d = t1 - t2;
    let m11 = (DP_M1 + DP_M2) * DP_L1 * DP_L1;
    let m12 = DP_M2 * DP_L1 * DP_L2 * d.cos();
    let m22 = DP_M2 * DP_L2 * DP_L2;
    let det = m11 * m22 - m12 * m12;
    if det.abs() <= 1e-12 {
        return Err(Error::SingularMassMatrix(det));
    }
    let c1 = DP_M2 * DP_L1 * DP_L2 * w2 * w2 * d.sin();
    let c2 = -DP_M2 * DP_L1 * DP_L2 * w1 * w1 * d.sin();
    let g1 = (DP_M1 + DP_M2) * PEND_G * DP_L1 * t1.sin();
    let g2 = DP_M2 * PEND_G * DP_L2 * t2.sin();
    let r1 = tau1 - c1 - g1 - DP_DAMP * w1;
    let r2 = tau2 - c2 - g2 - DP_DAMP * w2;
    let a1 = (m22 * r1 - m12 * r2) / det;
    let a2 = (m11 * r2 - m12 * r1) / det;
    Ok(vec![w1, w2, a1, a2])
}

/// Total mechanical energy of the double pendulum; used as an integration oracle.
pub fn double_pendulum_energy(x: &[f64]) -> f64 {
    let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
    let kinetic = 0.5 * (DP_M1 + DP_M2) * DP_L1 * DP_L1 * w1 * w1
        + 0.5 * DP_M2 * DP_L2 * DP_L2 * w2 * w2
        + DP_M2 * DP_L1 * DP_L2 * w1 * w2 * (t1 - t2).cos();
    let potential =
        -(DP_M1 + DP_M2) * PEND_G * DP_L1 * t1.cos() - DP_M2 * PEND_G * DP_L2 * t2.cos();
    kinetic + potential
}

/// Classical RK4 with zero-order-hold control.
pub fn rk4_step<F>(deriv: F, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    debug_assert!(dt > 0.0);
    let k1 = deriv(x, u)?;
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k2 = deriv(&x2, u)?;
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k3 = deriv(&x3, u)?;
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
    let k4 = deriv(&x4, u)?;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk4 intermediate state".into()));
    }
    Ok(out)
}

/// One fixed-length rollout window: `T_win + 1` states and `T_win` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn transitions(&self) -> usize {
        self.controls.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub windows: Vec<Trajectory>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub env: EnvSpec,
    pub seed: u64,
    /// Total transition count of the train split.
    pub m: usize,
    pub t_win: usize,
}

impl Dataset {
    pub fn train_windows(&self) -> impl Iterator<Item = &Trajectory> {
        self.train_idx.iter().map(|&i| &self.windows[i])
    }

    pub fn test_windows(&self) -> impl Iterator<Item = &Trajectory> {
        self.test_idx.iter().map(|&i| &self.windows[i])
    }

    /// All (s, s+) transition pairs of the train split.
    pub fn train_transitions(&self) -> Vec<(&[f64], &[f64], &[f64])> {
        let mut out = Vec::with_capacity(self.m);
        for w in self.train_windows() {
            for t in 0..w.transitions() {
                out.push((
                    w.states[t].as_slice(),
                    w.controls[t].as_slice(),
                    w.states[t + 1].as_slice(),
                ));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut states = Vec::new();
        let mut controls = Vec::new();
        let mut lengths = Vec::new();
        for w in &self.windows {
            lengths.push(w.transitions() as f64);
            for s in &w.states {
                states.extend_from_slice(s);
            }
            for u in &w.controls {
                controls.extend_from_slice(u);
            }
        }
        let header = json!({
            "format": "koopman-lab/dataset",
            "version": 1,
            "env": self.env,
            "seed": self.seed,
            "m": self.m,
            "t_win": self.t_win,
            "n_train": self.train_idx.len(),
            "n_test": self.test_idx.len(),
        });
        io::write_container(
            path,
            header,
            &[
                ("window_lengths", &lengths),
                ("states", &states),
                ("controls", &controls),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = io::read_container(path)?;
        let env: EnvSpec = serde_json::from_value(io::require_field(&header, "env")?.clone())?;
        let seed = io::require_field(&header, "seed")?
            .as_u64()
            .ok_or_else(|| Error::Format("seed must be an integer".into()))?;
        let m = io::require_field(&header, "m")?.as_u64().unwrap_or(0) as usize;
        let t_win = io::require_field(&header, "t_win")?.as_u64().unwrap_or(0) as usize;
        let n_train = io::require_field(&header, "n_train")?.as_u64().unwrap_or(0) as usize;
        let n_test = io::require_field(&header, "n_test")?.as_u64().unwrap_or(0) as usize;

        let lengths = io::find_block(&blocks, "window_lengths")?;
        let states = io::find_block(&blocks, "states")?;
        let controls = io::find_block(&blocks, "controls")?;

        let mut windows = Vec::with_capacity(lengths.len());
        let (mut si, mut ci) = (0usize, 0usize);
        for &len in lengths {
            let t = len as usize;
            let mut w = Trajectory {
                states: Vec::with_capacity(t + 1),
                controls: Vec::with_capacity(t),
            };
            for _ in 0..=t {
                w.states.push(states[si..si + env.n_x].to_vec());
                si += env.n_x;
            }
            for _ in 0..t {
                w.controls.push(controls[ci..ci + env.n_u].to_vec());
                ci += env.n_u;
            }
            windows.push(w);
        }
        if windows.len() != n_train + n_test {
            return Err(Error::Format(format!(
                "window count {} does not match split sizes {} + {}",
                windows.len(),
                n_train,
                n_test
            )));
        }
        Ok(Dataset {
            windows,
            train_idx: (0..n_train).collect(),
            test_idx: (n_train..n_train + n_test).collect(),
            env,
            seed,
            m,
            t_win,
        })
    }
}

fn rollout_window(spec: &EnvSpec, rng: &mut Rng, t_win: usize) -> Result<Trajectory> {
    'resample: for _ in 0..RESAMPLE_CAP {
        let x0: Vec<f64> = (0..spec.n_x)
            .map(|i| rng.uniform(spec.state_lo[i], spec.state_hi[i]))
            .collect();
        let mut states = vec![x0];
        let mut controls = Vec::with_capacity(t_win);
        for _ in 0..t_win {
            let u: Vec<f64> = spec.u_bound.iter().map(|&b| rng.uniform(-b, b)).collect();
            let next = match spec.step(states.last().unwrap(), &u) {
                Ok(x) => x,
                Err(_) => continue 'resample,
            };
            if next.iter().any(|v| !v.is_finite() || v.abs() > STATE_SANITY_BOUND) {
                continue 'resample;
            }
            controls.push(u);
            states.push(next);
        }
        return Ok(Trajectory { states, controls });
    }
    Err(Error::DataGeneration(format!(
        "window resample cap ({RESAMPLE_CAP}) exhausted for {}",
        spec.name()
    )))
}

/// Strategy-I dataset: uniform initial states, uniform per-step controls,
/// `ceil(m / t_win)` train windows (last one truncated so the train split has
/// exactly `m` transitions) plus a fixed 2048-transition test split drawn
/// from an independent sub-seed.
pub fn generate_dataset(spec: &EnvSpec, m: usize, t_win: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if t_win == 0 || m < t_win {
        return Err(Error::Config(format!(
            "need m >= t_win >= 1, got m = {m}, t_win = {t_win}"
        )));
    }
    let n_train = m.div_ceil(t_win);
    let mut rng = Rng::substream(seed, 0);
    let mut windows = Vec::with_capacity(n_train);
    let mut total = 0usize;
    for _ in 0..n_train {
        let mut w = rollout_window(spec, &mut rng, t_win)?;
        if total + w.transitions() > m {
            let keep = m - total;
            w.states.truncate(keep + 1);
            w.controls.truncate(keep);
        }
        total += w.transitions();
        windows.push(w);
    }
    debug_assert_eq!(total, m);

    let mut test_rng = Rng::substream(seed, 1);
    let n_test = TEST_TRANSITIONS.div_ceil(t_win);
    for _ in 0..n_test {
        windows.push(rollout_window(spec, &mut test_rng, t_win)?);
    }

    Ok(Dataset {
        train_idx: (0..n_train).collect(),
        test_idx: (n_train..n_train + n_test).collect(),
        windows,
        env: spec.clone(),
        seed,
        m,
        t_win,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_fixed_point() {
        let spec = EnvSpec::polynomial(3);
        assert_eq!(poly_step(&[0.0, 0.0, 0.0], &spec), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn poly_deg3_unit_state() {
        let spec = EnvSpec::polynomial(3);
        let out = poly_step(&[1.0, 1.0, 1.0], &spec);
        assert!((out[0] - 0.85).abs() < 1e-15);
        assert!((out[1] - 0.90).abs() < 1e-15);
        assert!((out[2] - 1.80).abs() < 1e-15);
    }

    #[test]
    fn poly_deg5_sum() {
        let spec = EnvSpec::polynomial(5);
        let out = poly_step(&[2.0, 0.0, 0.0], &spec);
        // 0.9 * (2 + 4 + 8)
        assert!((out[2] - 12.6).abs() < 1e-12);
    }

    #[test]
    fn poly_linear_when_b_zero() {
        let mut spec = EnvSpec::polynomial(3);
        spec.b_p = 0.0;
        let x = [0.3, -0.7, 1.1];
        let a = 2.5;
        let scaled: Vec<f64> = x.iter().map(|v| a * v).collect();
        let lhs = poly_step(&scaled, &spec);
        let rhs: Vec<f64> = poly_step(&x, &spec).iter().map(|v| a * v).collect();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert_eq!(l, r);
        }
    }

    #[test]
    fn pendulum_equilibria() {
        let spec = EnvSpec::damped_pendulum();
        let d0 = pendulum_deriv(&[0.0, 0.0], &[0.0], &spec);
        assert_eq!(d0, vec![0.0, 0.0]);
        let dpi = pendulum_deriv(&[std::f64::consts::PI, 0.0], &[0.0], &spec);
        assert!(dpi[0].abs() < 1e-15 && dpi[1].abs() < 1e-12);
    }

    #[test]
    fn pendulum_quarter_turn() {
        let spec = EnvSpec::damped_pendulum();
        let d = pendulum_deriv(&[std::f64::consts::FRAC_PI_2, 0.0], &[0.0], &spec);
        assert!((d[0]).abs() < 1e-15);
        assert!((d[1] + 9.81).abs() < 1e-12);
    }

    #[test]
    fn double_pendulum_rest() {
        let spec = EnvSpec::double_pendulum();
        let d = double_pendulum_deriv(&[0.0; 4], &[0.0, 0.0], &spec).unwrap();
        assert_eq!(d, vec![0.0; 4]);
    }

    #[test]
    fn double_pendulum_odd_symmetry() {
        let spec = EnvSpec::double_pendulum();
        let x = [0.4, -0.3, 1.2, -0.9];
        let xm: Vec<f64> = x.iter().map(|v| -v).collect();
        let d = double_pendulum_deriv(&x, &[0.0, 0.0], &spec).unwrap();
        let dm = double_pendulum_deriv(&xm, &[0.0, 0.0], &spec).unwrap();
        for (a, b) in d.iter().zip(&dm) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_zero_deriv() {
        let out = rk4_step(|_, _| Ok(vec![0.0, 0.0]), &[1.5, -2.0], &[], 0.1).unwrap();
        assert_eq!(out, vec![1.5, -2.0]);
    }

    #[test]
    fn rk4_exponential_taylor() {
        let out = rk4_step(|x, _| Ok(vec![x[0]]), &[1.0], &[], 0.1).unwrap();
        // RK4 truncation of e^0.1: 1 + h + h^2/2 + h^3/6 + h^4/24
        let expect = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((out[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn rk4_matches_fine_euler_on_pendulum() {
        let spec = EnvSpec::damped_pendulum();
        let x0 = [std::f64::consts::FRAC_PI_2, 0.0];
        let rk4 = rk4_step(
            |x, u| Ok(pendulum_deriv(x, u, &spec)),
            &x0,
            &[0.0],
            0.02,
        )
        .unwrap();
        let mut x = x0.to_vec();
        let h = 1e-5;
        for _ in 0..2000 {
            let d = pendulum_deriv(&x, &[0.0], &spec);
            for i in 0..2 {
                x[i] += h * d[i];
            }
        }
        for i in 0..2 {
            assert!((rk4[i] - x[i]).abs() < 1e-6, "coord {i}: {} vs {}", rk4[i], x[i]);
        }
    }

    #[test]
    fn rk4_order_on_linear_system() {
        // one-step error on xdot = x halves by >= 2^4 * 0.9 when dt halves
        let exact = |h: f64| h.exp();
        let step = |h: f64| rk4_step(|x, _| Ok(vec![x[0]]), &[1.0], &[], h).unwrap()[0];
        let e1 = (step(0.1) - exact(0.1)).abs();
        let e2 = (step(0.05) - exact(0.05)).abs();
        assert!(e1 / e2 >= 16.0 * 0.9, "ratio {}", e1 / e2);
    }

    #[test]
    fn energy_conserved_without_damping() {
        // undamped, unforced two-link rollout at dt = 0.001
        let conservative = |x: &[f64], _u: &[f64]| -> Result<Vec<f64>> {
            let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
            let d = t1 - t2;
            let m11 = (DP_M1 + DP_M2) * DP_L1 * DP_L1;
            let m12 = DP_M2 * DP_L1 * DP_L2 * d.cos();
            let m22 = DP_M2 * DP_L2 * DP_L2;
            let det = m11 * m22 - m12 * m12;
            let c1 = DP_M2 * DP_L1 * DP_L2 * w2 * w2 * d.sin();
            let c2 = -DP_M2 * DP_L1 * DP_L2 * w1 * w1 * d.sin();
            let g1 = (DP_M1 + DP_M2) * PEND_G * DP_L1 * t1.sin();
            let g2 = DP_M2 * PEND_G * DP_L2 * t2.sin();
            let r1 = -c1 - g1;
            let r2 = -c2 - g2;
            Ok(vec![w1, w2, (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det])
        };
        let mut x = vec![0.7, -0.4, 0.0, 0.0];
        let e0 = double_pendulum_energy(&x);
        for _ in 0..1000 {
            x = rk4_step(conservative, &x, &[], 0.001).unwrap();
        }
        let e1 = double_pendulum_energy(&x);
        assert!(((e1 - e0) / e0.abs()).abs() < 1e-6, "drift {}", (e1 - e0) / e0);
    }

    #[test]
    fn dataset_deterministic_and_counted() {
        let spec = EnvSpec::damped_pendulum();
        let d1 = generate_dataset(&spec, 10, 5, 3).unwrap();
        let d2 = generate_dataset(&spec, 10, 5, 3).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.train_idx.len(), 2);
        assert_eq!(d1.train_windows().map(|w| w.transitions()).sum::<usize>(), 10);
        // disjoint split
        assert!(d1.train_idx.iter().all(|i| !d1.test_idx.contains(i)));
    }

    #[test]
    fn polynomial_initial_states_in_hypercube() {
        let spec = EnvSpec::polynomial(3);
        let d = generate_dataset(&spec, 50, 5, 11).unwrap();
        for w in &d.windows {
            for v in &w.states[0] {
                assert!(v.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn rollout_regeneration_invariant() {
        let spec = EnvSpec::damped_pendulum();
        let d = generate_dataset(&spec, 20, 5, 17).unwrap();
        for w in &d.windows {
            let mut x = w.states[0].clone();
            for (t, u) in w.controls.iter().enumerate() {
                x = spec.step(&x, u).unwrap();
                assert_eq!(x, w.states[t + 1]);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.klb");
        let spec = EnvSpec::polynomial(4);
        let d = generate_dataset(&spec, 25, 5, 9).unwrap();
        d.save(&p).unwrap();
        let back = Dataset::load(&p).unwrap();
        assert_eq!(d, back);
    }
}
