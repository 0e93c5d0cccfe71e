//! Cyclic Jacobi eigendecomposition for symmetric matrices.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const CONV_TOL: f64 = 1e-12;
const SYM_TOL: f64 = 1e-9;

/// Eigendecomposition of a symmetric matrix; eigenvalues descending,
/// eigenvectors as columns of the returned matrix.
pub fn eig_sym(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::ShapeMismatch("eig_sym needs a square matrix".into()));
    }
    let asym = m.max_asymmetry();
    let scale = m.frobenius_norm().max(1e-300);
    if asym > SYM_TOL * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);

    let mut converged = n < 2;
    let mut off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        off = off.sqrt();
        if off <= CONV_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= CONV_TOL * scale * 1e-3 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = c * apj - s * aqj;
                    a[(q, j)] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::EigNoConvergence {
            sweeps: MAX_SWEEPS,
            off_norm: off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            vecs[(i, k)] = v[(i, j)];
        }
    }
    Ok((vals, vecs))
}

/// Condition number lambda_max / lambda_min of a symmetric PSD matrix.
///
/// Returns `f64::INFINITY` when the smallest eigenvalue is at or below 1e-300.
pub fn cond_spd(m: &Matrix) -> Result<f64> {
    let (vals, _) = eig_sym(m)?;
    if vals.is_empty() {
        return Err(Error::ShapeMismatch("empty matrix".into()));
    }
    let lmax = vals[0];
    let lmin = *vals.last().unwrap();
    if lmin <= 1e-300 {
        return Ok(f64::INFINITY);
    }
    Ok(lmax / lmin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_condition() {
        assert!((cond_spd(&Matrix::identity(4)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_condition() {
        let m = Matrix::diag(&[4.0, 1.0]);
        assert!((cond_spd(&m).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn known_spectrum_via_rotation() {
        // build Q^T D Q from a random orthogonal Q and known D
        let mut rng = crate::numerics::Rng::new(5);
        let g = Matrix::from_fn(5, 5, |_, _| rng.normal());
        let q = crate::numerics::nearest_orthogonal(&g).unwrap();
        let d = Matrix::diag(&[10.0, 5.0, 2.0, 1.0, 0.5]);
        let m = q.transpose().matmul(&d).matmul(&q);
        let sym = m.add(&m.transpose()).scale(0.5);
        let kappa = cond_spd(&sym).unwrap();
        assert!((kappa - 20.0).abs() < 1e-8, "kappa = {kappa}");
    }

    #[test]
    fn asymmetric_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(cond_spd(&m).is_err());
    }

    #[test]
    fn singular_gives_infinity() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(cond_spd(&m).unwrap().is_infinite());
    }

    #[test]
    fn scale_invariance() {
        let mut rng = crate::numerics::Rng::new(9);
        let g = Matrix::from_fn(4, 4, |_, _| rng.normal());
        let spd = g.matmul(&g.transpose()).add(&Matrix::identity(4).scale(0.1));
        let k1 = cond_spd(&spd).unwrap();
        let k2 = cond_spd(&spd.scale(3.7)).unwrap();
        assert!((k1 - k2).abs() / k1 < 1e-9);
    }
}
