//! Spectral and statistical diagnostics of learned embeddings: Gram
//! condition number, control-matrix conditioning, and feature correlations.

use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::net::KoopmanModel;
use crate::numerics::{eig_sym, gemm_nt, gemm_tn, Matrix};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const VARIANCE_FLOOR: f64 = 1e-18;
/// Relative eigenvalue floor below which the covariance counts as rank
/// deficient and the condition number is reported as +inf.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub kappa_g: f64,
    pub lambda_min_g: f64,
    pub kappa_btb: f64,
    pub mean_abs_offdiag_corr: f64,
    /// Pearson correlation over the included embedding coordinates.
    pub corr: Vec<Vec<f64>>,
    /// Coordinates excluded from the correlation for near-zero variance.
    pub excluded: Vec<usize>,
}

impl DiagnosticsReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn save_corr_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for row in &self.corr {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// All test-split states encoded as columns.
fn encode_test_split(model: &KoopmanModel, data: &Dataset) -> Result<Matrix> {
    let mut states: Vec<&[f64]> = Vec::new();
    for w in data.test_windows() {
        for s in &w.states {
            states.push(s);
        }
    }
    if states.len() < 2 {
        return Err(Error::Config("need >= 2 test states".into()));
    }
    let x = Matrix::from_fn(model.n_x, states.len(), |i, j| states[j][i]);
    Ok(model.encode_batch(&x).z)
}

/// Centered covariance of features-as-rows, samples-as-columns.
fn centered_cov(phi: &Matrix) -> Matrix {
    let (n, b) = (phi.rows(), phi.cols());
    let mut centered = phi.clone();
    for i in 0..n {
        let mean = phi.row(i).iter().sum::<f64>() / b as f64;
        for v in &mut centered.data_mut()[i * b..(i + 1) * b] {
            *v -= mean;
        }
    }
    let mut g = Matrix::zeros(n, n);
    gemm_nt(n, b, n, 1.0 / (b - 1) as f64, centered.data(), centered.data(), 0.0, g.data_mut());
    // symmetrize away accumulation noise so the eigensolver accepts it
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Condition number and smallest eigenvalue of a centered feature covariance.
pub fn covariance_condition(phi: &Matrix) -> Result<(f64, f64)> {
    let g = centered_cov(phi);
    for i in 0..g.rows() {
        if g[(i, i)] <= VARIANCE_FLOOR {
            return Ok((f64::INFINITY, 0.0));
        }
    }
    let (vals, _) = eig_sym(&g)?;
    let (l_max, l_min) = (vals[0], *vals.last().unwrap());
    if l_min <= RANK_TOL * l_max {
        return Ok((f64::INFINITY, l_min.max(0.0)));
    }
    Ok((l_max / l_min, l_min))
}

/// kappa(G) of the test-split embedding covariance.
pub fn gram_condition(model: &KoopmanModel, data: &Dataset) -> Result<(f64, f64)> {
    let phi = encode_test_split(model, data)?;
    covariance_condition(&phi)
}

/// kappa(B^T B) of the model's control matrix.
pub fn control_condition(model: &KoopmanModel) -> Result<f64> {
    if model.n_u == 0 {
        return Err(Error::Config("control_condition needs n_u >= 1".into()));
    }
    let b = model.b_matrix();
    let n_u = b.cols();
    let mut btb = Matrix::zeros(n_u, n_u);
    gemm_tn(n_u, b.rows(), n_u, 1.0, b.data(), b.data(), 0.0, btb.data_mut());
    let (vals, _) = eig_sym(&btb)?;
    let (l_max, l_min) = (vals[0], *vals.last().unwrap());
    if l_min <= RANK_TOL * l_max || l_min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(l_max / l_min)
}

/// Pearson correlation of feature coordinates (rows); near-constant
/// coordinates are excluded and reported by index.
pub fn correlation(phi: &Matrix) -> Result<(Matrix, f64, Vec<usize>)> {
    let (n, b) = (phi.rows(), phi.cols());
    if b < 2 {
        return Err(Error::Config("correlation needs >= 2 samples".into()));
    }
    let g = centered_cov(phi);
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..n {
        if g[(i, i)] > VARIANCE_FLOOR {
            included.push(i);
        } else {
            excluded.push(i);
        }
    }
    if included.is_empty() {
        return Err(Error::Config("all embedding coordinates are constant".into()));
    }
    let k = included.len();
    let mut corr = Matrix::zeros(k, k);
    for (a, &i) in included.iter().enumerate() {
        for (bb, &j) in included.iter().enumerate() {
            corr[(a, bb)] = g[(i, j)] / (g[(i, i)] * g[(j, j)]).sqrt();
        }
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += corr[(i, j)].abs();
            }
        }
    }
    let mean = if k > 1 { sum / (k * (k - 1)) as f64 } else { 0.0 };
    Ok((corr, mean, excluded))
}

/// Feature correlation of the model's embedding over the test split.
pub fn feature_correlation(model: &KoopmanModel, data: &Dataset) -> Result<(Matrix, f64, Vec<usize>)> {
    let phi = encode_test_split(model, data)?;
    correlation(&phi)
}

/// The full report at once.
pub fn diagnose(model: &KoopmanModel, data: &Dataset) -> Result<DiagnosticsReport> {
    let phi = encode_test_split(model, data)?;
    let (kappa_g, lambda_min_g) = covariance_condition(&phi)?;
    let kappa_btb = if model.n_u > 0 {
        control_condition(model)?
    } else {
        f64::NAN
    };
    let (corr, mean_abs, excluded) = correlation(&phi)?;
    let corr_rows: Vec<Vec<f64>> = (0..corr.rows()).map(|i| corr.row(i).to_vec()).collect();
    Ok(DiagnosticsReport {
        kappa_g,
        lambda_min_g,
        kappa_btb,
        mean_abs_offdiag_corr: mean_abs,
        corr: corr_rows,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{nearest_orthogonal, Rng};

    fn white_noise(n: usize, samples: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(n, samples, |_, _| rng.normal())
    }

    #[test]
    fn rotated_white_noise_kappa_near_one() {
        let mut rng = Rng::new(3);
        let q = nearest_orthogonal(&Matrix::from_fn(4, 4, |_, _| rng.normal())).unwrap();
        let phi = q.matmul(&white_noise(4, 50_000, 7));
        let (kappa, _) = covariance_condition(&phi).unwrap();
        assert!((kappa - 1.0).abs() < 0.1, "kappa {kappa}");
    }

    #[test]
    fn duplicate_feature_is_infinite() {
        let base = white_noise(2, 500, 1);
        let phi = Matrix::from_fn(3, 500, |i, j| base[(i.min(1), j)]);
        let (kappa, _) = covariance_condition(&phi).unwrap();
        assert!(kappa.is_infinite());
    }

    #[test]
    fn kappa_scale_invariant() {
        let phi = white_noise(3, 2000, 5);
        let (k1, _) = covariance_condition(&phi).unwrap();
        let (k2, _) = covariance_condition(&phi.scale(37.0)).unwrap();
        assert!(((k1 - k2) / k1).abs() < 1e-9);
    }

    #[test]
    fn kappa_invariant_to_recentering() {
        let phi = white_noise(3, 2000, 9);
        let mut shifted = phi.clone();
        for i in 0..3 {
            let cols = shifted.cols();
            for v in &mut shifted.data_mut()[i * cols..(i + 1) * cols] {
                *v += 10.0 * (i as f64 + 1.0);
            }
        }
        let (k1, _) = covariance_condition(&phi).unwrap();
        let (k2, _) = covariance_condition(&shifted).unwrap();
        assert!(((k1 - k2) / k1).abs() < 1e-9);
    }

    #[test]
    fn control_condition_examples() {
        // orthonormal columns -> 1
        let mut m = KoopmanModel::init(1, 2, 1, 0).unwrap();
        let mut b = Matrix::zeros(2, 2);
        b[(0, 0)] = 1.0;
        b[(1, 1)] = 1.0;
        m.set_b(&b);
        assert!((control_condition(&m).unwrap() - 1.0).abs() < 1e-12);

        // B = [[2,0],[0,1],[0,0]] -> kappa(B^T B) = 4, via a 3-latent model
        let mut m2 = KoopmanModel::init(1, 2, 2, 0).unwrap();
        let b2 = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        m2.set_b(&b2);
        assert!((control_condition(&m2).unwrap() - 4.0).abs() < 1e-10);

        // scaling one column by c scales kappa by c^2
        let mut m3 = KoopmanModel::init(1, 2, 2, 0).unwrap();
        let c = 3.0;
        let b3 = Matrix::from_rows(&[vec![c, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        m3.set_b(&b3);
        assert!((control_condition(&m3).unwrap() - c * c).abs() < 1e-9);
    }

    #[test]
    fn control_rank_deficient_infinite() {
        let mut m = KoopmanModel::init(1, 2, 1, 0).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        m.set_b(&b);
        assert!(control_condition(&m).unwrap().is_infinite());
    }

    #[test]
    fn correlation_white_noise_small() {
        let phi = white_noise(4, 100_000, 11);
        let (corr, mean, excluded) = correlation(&phi).unwrap();
        assert!(excluded.is_empty());
        assert!(mean < 0.02, "mean |offdiag| {mean}");
        for i in 0..4 {
            assert!((corr[(i, i)] - 1.0).abs() < 1e-9);
        }
        assert!(corr.max_asymmetry() < 1e-12);
    }

    #[test]
    fn correlation_duplicated_pair_is_one() {
        let base = white_noise(1, 300, 2);
        let phi = Matrix::from_fn(2, 300, |_, j| base[(0, j)]);
        let (corr, _, _) = correlation(&phi).unwrap();
        assert!((corr[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_coordinate_excluded() {
        let mut phi = white_noise(3, 100, 8);
        let cols = phi.cols();
        for v in &mut phi.data_mut()[cols..2 * cols] {
            *v = 5.0;
        }
        let (corr, _, excluded) = correlation(&phi).unwrap();
        assert_eq!(excluded, vec![1]);
        assert_eq!(corr.rows(), 2);
    }

    #[test]
    fn all_constant_rejected() {
        let phi = Matrix::from_fn(2, 50, |_, _| 1.0);
        assert!(correlation(&phi).is_err());
    }
}
