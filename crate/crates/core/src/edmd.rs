//! Classical EDMD over explicit dictionaries: the closed-form operator
//! K = Across * G^-1 and its controlled split (A, B) with the control
//! appended raw to the lifted state.

use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::io;
use crate::net::KoopmanModel;
use crate::numerics::{eig_sym, Matrix};
use serde_json::json;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum Dictionary {
    Identity {
        n_x: usize,
    },
    /// All monomials of total degree <= max_degree in graded-lex order,
    /// constant term included.
    Polynomial {
        n_x: usize,
        max_degree: usize,
        exponents: Vec<Vec<u32>>,
    },
    /// Features from a trained state-augmented encoder.
    Neural(Box<KoopmanModel>),
}

/// Exponent vectors of all monomials with total degree <= max_degree,
/// graded-lex: ascending total degree, lexicographically descending within
/// a degree (x1 before x2).
pub fn graded_lex_exponents(n_vars: usize, max_degree: usize) -> Vec<Vec<u32>> {
    fn fill(deg: u32, vars: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if vars == 1 {
            prefix.push(deg);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=deg).rev() {
            prefix.push(e);
            fill(deg - e, vars - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for deg in 0..=max_degree as u32 {
        fill(deg, n_vars, &mut Vec::new(), &mut out);
    }
    out
}

impl Dictionary {
    pub fn identity(n_x: usize) -> Self {
        Dictionary::Identity { n_x }
    }

    pub fn polynomial(n_x: usize, max_degree: usize) -> Self {
        Dictionary::Polynomial {
            n_x,
            max_degree,
            exponents: graded_lex_exponents(n_x, max_degree),
        }
    }

    pub fn n_x(&self) -> usize {
        match self {
            Dictionary::Identity { n_x } => *n_x,
            Dictionary::Polynomial { n_x, .. } => *n_x,
            Dictionary::Neural(m) => m.n_x,
        }
    }

    /// Output feature dimension.
    pub fn n(&self) -> usize {
        match self {
            Dictionary::Identity { n_x } => *n_x,
            Dictionary::Polynomial { exponents, .. } => exponents.len(),
            Dictionary::Neural(m) => m.n(),
        }
    }

    /// Indices of the physical state inside the feature vector.
    pub fn state_coords(&self) -> Vec<usize> {
        match self {
            Dictionary::Identity { n_x } => (0..*n_x).collect(),
            // graded-lex places the constant first, then the degree-1 block
            Dictionary::Polynomial { n_x, .. } => (1..=*n_x).collect(),
            Dictionary::Neural(m) => (0..m.n_x).collect(),
        }
    }

    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_x(), "lift: state dim mismatch");
        match self {
            Dictionary::Identity { .. } => x.to_vec(),
            Dictionary::Polynomial { exponents, .. } => exponents
                .iter()
                .map(|exps| {
                    exps.iter()
                        .zip(x)
                        .map(|(&e, &v)| v.powi(e as i32))
                        .product()
                })
                .collect(),
            Dictionary::Neural(m) => m.encode(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdModel {
    pub dictionary: Dictionary,
    /// n x (n + n_u) operator; the left n x n block is A, the right block B.
    pub k: Matrix,
    pub n_u: usize,
    pub ridge: f64,
    pub lambda_min_g: f64,
    pub kappa_g: f64,
}

impl EdmdModel {
    pub fn a(&self) -> Matrix {
        let n = self.dictionary.n();
        self.k.block(0, 0, n, n)
    }

    pub fn b(&self) -> Matrix {
        let n = self.dictionary.n();
        self.k.block(0, n, n, self.n_u)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (kind, max_degree) = match &self.dictionary {
            Dictionary::Identity { .. } => ("identity", 0),
            Dictionary::Polynomial { max_degree, .. } => ("polynomial", *max_degree),
            Dictionary::Neural(_) => ("neural", 0),
        };
        let header = json!({
            "format": "koopman-lab/edmd",
            "version": 1,
            "dictionary": kind,
            "max_degree": max_degree,
            "n_x": self.dictionary.n_x(),
            "n": self.dictionary.n(),
            "n_u": self.n_u,
            "ridge": self.ridge,
            "lambda_min_g": self.lambda_min_g,
            "kappa_g": if self.kappa_g.is_finite() { json!(self.kappa_g) } else { json!("inf") },
        });
        let mut blocks: Vec<(&str, &[f64])> = vec![("k", self.k.data())];
        let neural_params;
        if let Dictionary::Neural(m) = &self.dictionary {
            neural_params = (m.params.clone(), m.n_u, m.n_mult);
            blocks.push(("encoder_params", &neural_params.0));
            return io::write_container(
                path,
                {
                    let mut h = header;
                    h.as_object_mut().unwrap().insert("encoder_n_u".into(), json!(neural_params.1));
                    h.as_object_mut().unwrap().insert("encoder_n_mult".into(), json!(neural_params.2));
                    h
                },
                &blocks,
            );
        }
        io::write_container(path, header, &blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = io::read_container(path)?;
        let kind = io::require_field(&header, "dictionary")?
            .as_str()
            .ok_or_else(|| Error::Format("dictionary must be a string".into()))?
            .to_string();
        let n_x = io::require_field(&header, "n_x")?.as_u64().unwrap_or(0) as usize;
        let n = io::require_field(&header, "n")?.as_u64().unwrap_or(0) as usize;
        let n_u = io::require_field(&header, "n_u")?.as_u64().unwrap_or(0) as usize;
        let ridge = io::require_field(&header, "ridge")?.as_f64().unwrap_or(0.0);
        let lambda_min_g = io::require_field(&header, "lambda_min_g")?
            .as_f64()
            .unwrap_or(0.0);
        let kappa_g = match io::require_field(&header, "kappa_g")? {
            v if v.is_f64() => v.as_f64().unwrap(),
            _ => f64::INFINITY,
        };
        let dictionary = match kind.as_str() {
            "identity" => Dictionary::identity(n_x),
            "polynomial" => {
                let d = io::require_field(&header, "max_degree")?.as_u64().unwrap_or(0) as usize;
                Dictionary::polynomial(n_x, d)
            }
            "neural" => {
                let enc_n_u =
                    io::require_field(&header, "encoder_n_u")?.as_u64().unwrap_or(0) as usize;
                let enc_mult =
                    io::require_field(&header, "encoder_n_mult")?.as_u64().unwrap_or(0) as usize;
                let params = io::find_block(&blocks, "encoder_params")?.to_vec();
                Dictionary::Neural(Box::new(KoopmanModel {
                    n_x,
                    n_u: enc_n_u,
                    n_mult: enc_mult,
                    params,
                }))
            }
            other => return Err(Error::Format(format!("unknown dictionary kind `{other}`"))),
        };
        if dictionary.n() != n {
            return Err(Error::Format(format!(
                "dictionary dimension {} does not match header n = {n}",
                dictionary.n()
            )));
        }
        let k = Matrix::from_vec(n, n + n_u, io::find_block(&blocks, "k")?.to_vec())?;
        Ok(EdmdModel {
            dictionary,
            k,
            n_u,
            ridge,
            lambda_min_g,
            kappa_g,
        })
    }
}

/// Empirical Gram and cross-correlation matrices over the train split.
///
/// Inputs are the augmented lift [Phi(x); u]; outputs are Phi(x+). G is the
/// (n+n_u)-square second-moment matrix, Across the n x (n+n_u) cross term.
pub fn gram_matrices(data: &Dataset, dict: &Dictionary) -> (Matrix, Matrix) {
    let n = dict.n();
    let n_u = data.env.n_u;
    let d = n + n_u;
    let mut g = Matrix::zeros(d, d);
    let mut across = Matrix::zeros(n, d);
    let transitions = data.train_transitions();
    let m = transitions.len().max(1) as f64;
    for (x, u, xp) in &transitions {
        let mut fin = dict.lift(x);
        fin.extend_from_slice(u);
        let fout = dict.lift(xp);
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] += fin[i] * fin[j];
            }
        }
        for i in 0..n {
            for j in 0..d {
                across[(i, j)] += fout[i] * fin[j];
            }
        }
    }
    (g.scale(1.0 / m), across.scale(1.0 / m))
}

/// Closed-form EDMD fit: K = Across * (G + ridge I)^-1.
pub fn edmd_fit(data: &Dataset, dict: &Dictionary, ridge: f64) -> Result<EdmdModel> {
    let (g, across) = gram_matrices(data, dict);
    let (eigvals, _) = eig_sym(&g)?;
    let lambda_min = *eigvals.last().unwrap();
    let lambda_max = eigvals[0];
    if ridge == 0.0 && lambda_min <= 1e-14 {
        return Err(Error::IllConditioned {
            lambda_min,
        });
    }
    let kappa = if lambda_min <= 1e-300 {
        f64::INFINITY
    } else {
        lambda_max / lambda_min
    };
    let mut g_r = g;
    for i in 0..g_r.rows() {
        g_r[(i, i)] += ridge;
    }
    // K^T solves (G + ridge I) K^T = Across^T
    let kt = g_r.solve_spd(&across.transpose())?;
    Ok(EdmdModel {
        dictionary: dict.clone(),
        k: kt.transpose(),
        n_u: data.env.n_u,
        ridge,
        lambda_min_g: lambda_min,
        kappa_g: kappa,
    })
}

/// Default ridge for neural-feature fits: 1e-8 * trace(G) / n.
pub fn default_neural_ridge(g: &Matrix) -> f64 {
    let tr: f64 = (0..g.rows()).map(|i| g[(i, i)]).sum();
    1e-8 * tr / g.rows() as f64
}

/// Mean squared lift-space residual of the fit objective.
pub fn fit_residual(data: &Dataset, model: &EdmdModel) -> f64 {
    let transitions = data.train_transitions();
    let m = transitions.len().max(1) as f64;
    let mut total = 0.0;
    for (x, u, xp) in &transitions {
        let mut fin = model.dictionary.lift(x);
        fin.extend_from_slice(u);
        let fout = model.dictionary.lift(xp);
        let pred = model.k.matvec(&fin);
        total += fout
            .iter()
            .zip(&pred)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / m
}

/// Mean one-step squared error on the state coordinates only. Unlike the
/// full lifted residual this is comparable across dictionaries and is
/// non-increasing as the dictionary grows (rows of K are independent
/// least-squares fits).
pub fn prediction_residual(data: &Dataset, model: &EdmdModel) -> f64 {
    let transitions = data.train_transitions();
    let m = transitions.len().max(1) as f64;
    let coords = model.dictionary.state_coords();
    let mut total = 0.0;
    for (x, u, xp) in &transitions {
        let mut fin = model.dictionary.lift(x);
        fin.extend_from_slice(u);
        let pred = model.k.matvec(&fin);
        total += coords
            .iter()
            .enumerate()
            .map(|(i, &ci)| (xp[i] - pred[ci]) * (xp[i] - pred[ci]))
            .sum::<f64>();
    }
    total / m
}

pub struct EdmdRollout {
    pub states: Vec<Vec<f64>>,
    pub truncated: bool,
}

/// Lift once, iterate the latent linear map, read the state coordinates.
pub fn edmd_rollout(model: &EdmdModel, x0: &[f64], controls: &[Vec<f64>], horizon: usize) -> EdmdRollout {
    assert!(horizon >= 1);
    let n = model.dictionary.n();
    let a = model.a();
    let b = model.b();
    let coords = model.dictionary.state_coords();
    let mut z = model.dictionary.lift(x0);
    let mut states = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut next = a.matvec(&z);
        if model.n_u > 0 {
            let u = controls
                .get(t)
                .map(|u| u.as_slice())
                .unwrap_or(&[]);
            let bu = b.matvec(u);
            for (nv, bv) in next.iter_mut().zip(&bu) {
                *nv += bv;
            }
        }
        z = next;
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e12 {
            return EdmdRollout {
                states,
                truncated: true,
            };
        }
        states.push(coords.iter().map(|&i| z[i]).collect());
        debug_assert_eq!(z.len(), n);
    }
    EdmdRollout {
        states,
        truncated: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, EnvSpec, Trajectory};
    use crate::numerics::Rng;

    fn dataset_from_pairs(n_x: usize, pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Dataset {
        let windows: Vec<Trajectory> = pairs
            .into_iter()
            .map(|(s, sp)| Trajectory {
                states: vec![s, sp],
                controls: vec![vec![]],
            })
            .collect();
        let mut env = EnvSpec::polynomial(3);
        env.n_x = n_x;
        env.n_u = 0;
        env.state_lo = vec![-1.0; n_x];
        env.state_hi = vec![1.0; n_x];
        let m = windows.len();
        Dataset {
            train_idx: (0..windows.len()).collect(),
            test_idx: vec![],
            windows,
            env,
            seed: 0,
            m,
            t_win: 1,
        }
    }

    #[test]
    fn lift_identity() {
        let d = Dictionary::identity(3);
        assert_eq!(d.lift(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn lift_scalar_degree2() {
        let d = Dictionary::polynomial(1, 2);
        assert_eq!(d.lift(&[3.0]), vec![1.0, 3.0, 9.0]);
    }

    #[test]
    fn lift_bivariate_graded_lex() {
        let d = Dictionary::polynomial(2, 2);
        assert_eq!(d.lift(&[2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn gram_single_pair() {
        let data = dataset_from_pairs(2, vec![(vec![1.0, 0.0], vec![0.0, 1.0])]);
        let (g, across) = gram_matrices(&data, &Dictionary::identity(2));
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(across.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn gram_mean_normalized() {
        let pair = (vec![0.5, -1.0], vec![1.0, 0.25]);
        let d1 = dataset_from_pairs(2, vec![pair.clone()]);
        let d2 = dataset_from_pairs(2, vec![pair.clone(), pair]);
        let (g1, a1) = gram_matrices(&d1, &Dictionary::identity(2));
        let (g2, a2) = gram_matrices(&d2, &Dictionary::identity(2));
        assert!(g1.sub(&g2).max_abs() < 1e-15);
        assert!(a1.sub(&a2).max_abs() < 1e-15);
    }

    #[test]
    fn gram_symmetric_psd() {
        let spec = EnvSpec::polynomial(3);
        let data = generate_dataset(&spec, 50, 5, 2).unwrap();
        let (g, _) = gram_matrices(&data, &Dictionary::polynomial(3, 2));
        assert!(g.max_asymmetry() < 1e-12);
        let (vals, _) = eig_sym(&g).unwrap();
        assert!(*vals.last().unwrap() > -1e-12);
    }

    #[test]
    fn scalar_linear_recovery() {
        let data = dataset_from_pairs(
            1,
            vec![(vec![1.0], vec![0.5]), (vec![-2.0], vec![-1.0])],
        );
        let model = edmd_fit(&data, &Dictionary::identity(1), 0.0).unwrap();
        assert!((model.k[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lifted_linear_recovery_with_control() {
        // z+ = A z + B u on a 2-d identity lift with full-rank excitation
        let a_true = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 0.8]]).unwrap();
        let b_true = Matrix::from_vec(2, 1, vec![0.5, -0.3]).unwrap();
        let mut rng = Rng::new(4);
        let mut windows = Vec::new();
        for _ in 0..40 {
            let x: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let u = vec![rng.uniform(-1.0, 1.0)];
            let mut xp = a_true.matvec(&x);
            let bu = b_true.matvec(&u);
            xp[0] += bu[0];
            xp[1] += bu[1];
            windows.push(Trajectory {
                states: vec![x, xp],
                controls: vec![u],
            });
        }
        let mut env = EnvSpec::damped_pendulum();
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
        let model = edmd_fit(&data, &Dictionary::identity(2), 0.0).unwrap();
        assert!(model.a().sub(&a_true).max_abs() < 1e-8);
        assert!(model.b().sub(&b_true).max_abs() < 1e-8);
    }

    #[test]
    fn matches_normal_equations_oracle() {
        // independent least-squares solve of the fit objective on 5 samples
        let mut rng = Rng::new(8);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
            .map(|_| {
                (
                    vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                    vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                )
            })
            .collect();
        let data = dataset_from_pairs(2, pairs.clone());
        for dict in [Dictionary::identity(2), Dictionary::polynomial(2, 2)] {
            let n = dict.n();
            let model = edmd_fit(&data, &dict, 0.0);
            let model = match model {
                Ok(m) => m,
                // deg-2 dictionary on 5 samples is rank deficient; skip
                Err(_) => continue,
            };
            // brute-force: stack Phi rows, solve via pinv
            let phi_in = Matrix::from_rows(
                &pairs.iter().map(|(s, _)| dict.lift(s)).collect::<Vec<_>>(),
            )
            .unwrap();
            let phi_out = Matrix::from_rows(
                &pairs.iter().map(|(_, sp)| dict.lift(sp)).collect::<Vec<_>>(),
            )
            .unwrap();
            let k_oracle = crate::numerics::pinv(&phi_in, 0.0)
                .unwrap()
                .matmul(&phi_out)
                .transpose();
            assert!(
                model.k.sub(&k_oracle).max_abs() < 1e-10,
                "dict n = {n}, diff = {}",
                model.k.sub(&k_oracle).max_abs()
            );
        }
    }

    #[test]
    fn residual_non_increasing_in_degree() {
        let spec = EnvSpec::polynomial(4);
        let data = generate_dataset(&spec, 400, 5, 6).unwrap();
        let mut prev = f64::INFINITY;
        for deg in 1..=3 {
            let dict = Dictionary::polynomial(3, deg);
            let model = edmd_fit(&data, &dict, 0.0).unwrap();
            let res = prediction_residual(&data, &model);
            assert!(res <= prev + 1e-12, "deg {deg}: {res} > {prev}");
            prev = res;
        }
    }

    #[test]
    fn rollout_exact_linear_system() {
        let data = dataset_from_pairs(
            1,
            vec![(vec![1.0], vec![0.5]), (vec![-2.0], vec![-1.0])],
        );
        let model = edmd_fit(&data, &Dictionary::identity(1), 0.0).unwrap();
        let roll = edmd_rollout(&model, &[2.0], &[], 4);
        assert!(!roll.truncated);
        let expect = [1.0, 0.5, 0.25, 0.125];
        for (s, e) in roll.states.iter().zip(&expect) {
            assert!((s[0] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn polynomial_system_in_span() {
        // deg-3 dictionary contains x1^p for the n_poly = 3 system
        let spec = EnvSpec::polynomial(3);
        let data = generate_dataset(&spec, 10_000, 5, 3).unwrap();
        let dict = Dictionary::polynomial(3, 3);
        let model = edmd_fit(&data, &dict, 0.0).unwrap();
        let mut worst = 0.0_f64;
        for w in data.test_windows().take(20) {
            let roll = edmd_rollout(&model, &w.states[0], &[], 5);
            for (t, s) in roll.states.iter().enumerate() {
                for (a, b) in s.iter().zip(&w.states[t + 1]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-6, "rollout error {worst}");
    }

    #[test]
    fn sample_order_invariance() {
        let mut rng = Rng::new(13);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
            .map(|_| {
                (
                    vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                    vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                )
            })
            .collect();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let m1 = edmd_fit(&dataset_from_pairs(2, pairs), &Dictionary::identity(2), 0.0).unwrap();
        let m2 = edmd_fit(&dataset_from_pairs(2, shuffled), &Dictionary::identity(2), 0.0).unwrap();
        assert!(m1.k.sub(&m2.k).max_abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let spec = EnvSpec::polynomial(3);
        let data = generate_dataset(&spec, 200, 5, 2).unwrap();
        let model = edmd_fit(&data, &Dictionary::polynomial(3, 2), 1e-10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("edmd.klb");
        model.save(&p).unwrap();
        let back = EdmdModel::load(&p).unwrap();
        assert_eq!(model, back);
    }
}
