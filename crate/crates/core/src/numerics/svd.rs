//! One-sided Jacobi SVD and the pseudoinverse built on it.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const CONV_TOL: f64 = 1e-12;

/// Thin SVD `M = U * diag(S) * Vt` with `S` non-negative and descending.
///
/// `U` is rows x min(rows, cols), `Vt` is min(rows, cols) x cols.
pub fn svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let (u, s, vt) = svd_tall(&m.transpose())?;
        Ok((vt.transpose(), s, u.transpose()))
    }
}

fn svd_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let rows = m.rows();
    let cols = m.cols();
    let mut a = m.clone();
    let mut v = Matrix::identity(cols);

    let mut converged = false;
    let mut off_norm = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        off_norm = 0.0;
        let mut rotations = 0usize;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let x = a[(i, p)];
                    let y = a[(i, q)];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                off_norm += apq * apq;
                // relative orthogonality of the column pair
                if apq * apq <= CONV_TOL * CONV_TOL * app * aqq {
                    continue;
                }
                rotations += 1;
                // Jacobi rotation that zeros the (p,q) entry of A^T A
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = a[(i, p)];
                    let y = a[(i, q)];
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
                for i in 0..cols {
                    let x = v[(i, p)];
                    let y = v[(i, q)];
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if rotations == 0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            off_norm: off_norm.sqrt(),
        });
    }

    // singular values are column norms; normalize columns of A into U
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Matrix::zeros(rows, cols);
    let mut s = vec![0.0; cols];
    let mut vt = Matrix::zeros(cols, cols);
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        if norms[j] > 0.0 {
            for i in 0..rows {
                u[(i, k)] = a[(i, j)] / norms[j];
            }
        }
        for i in 0..cols {
            vt[(k, i)] = v[(i, j)];
        }
    }
    Ok((u, s, vt))
}

/// Ridge-regularized or Moore-Penrose pseudoinverse.
///
/// `ridge > 0` returns `(M^T M + ridge I)^-1 M^T`; `ridge == 0` uses SVD
/// truncation, dropping singular values below `1e-12 * s_max`.
pub fn pinv(m: &Matrix, ridge: f64) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite("pinv input".into()));
    }
    if ridge > 0.0 {
        let mt = m.transpose();
        let mut gram = mt.matmul(m);
        for i in 0..gram.rows() {
            gram[(i, i)] += ridge;
        }
        return gram.solve_spd(&mt);
    }
    let (u, s, vt) = svd(m)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let cut = 1e-12 * smax;
    let sinv: Vec<f64> = s.iter().map(|&x| if x > cut { 1.0 / x } else { 0.0 }).collect();
    // V * diag(sinv) * U^T
    let mut vs = vt.transpose();
    for j in 0..vs.cols() {
        for i in 0..vs.rows() {
            vs[(i, j)] *= sinv[j];
        }
    }
    Ok(vs.matmul(&u.transpose()))
}

/// Project a square matrix onto the nearest orthogonal matrix (polar factor).
pub fn nearest_orthogonal(m: &Matrix) -> Result<Matrix> {
    let (u, _s, vt) = svd(m)?;
    Ok(u.matmul(&vt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(u: &Matrix, s: &[f64], vt: &Matrix) -> Matrix {
        let mut us = u.clone();
        for j in 0..us.cols() {
            for i in 0..us.rows() {
                us[(i, j)] *= s[j];
            }
        }
        us.matmul(vt)
    }

    #[test]
    fn identity_singular_values() {
        let (_, s, _) = svd(&Matrix::identity(3)).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_case() {
        let m = Matrix::diag(&[3.0, 1.0]);
        let (u, s, vt) = svd(&m).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((u[(i, j)].abs() - expect).abs() < 1e-12);
                assert!((vt[(i, j)].abs() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_seeded_4x3() {
        let mut rng = crate::numerics::Rng::new(42);
        let m = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let (u, s, vt) = svd(&m).unwrap();
        let err = reconstruct(&u, &s, &vt).sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-10, "reconstruction error {err}");
        // descending
        for w in s.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn wide_matrix() {
        let mut rng = crate::numerics::Rng::new(7);
        let m = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let (u, s, vt) = svd(&m).unwrap();
        let err = reconstruct(&u, &s, &vt).sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-10);
    }

    #[test]
    fn u_v_orthogonal() {
        let mut rng = crate::numerics::Rng::new(3);
        let m = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let (u, _, vt) = svd(&m).unwrap();
        let utu = u.transpose().matmul(&u);
        let vvt = vt.matmul(&vt.transpose());
        assert!(utu.sub(&Matrix::identity(4)).max_abs() < 1e-9);
        assert!(vvt.sub(&Matrix::identity(4)).max_abs() < 1e-9);
    }

    #[test]
    fn pinv_identity() {
        let p = pinv(&Matrix::identity(2), 0.0).unwrap();
        assert!(p.sub(&Matrix::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn pinv_column_vector() {
        let m = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let p = pinv(&m, 0.0).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((p[(0, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn penrose_identities() {
        let mut rng = crate::numerics::Rng::new(11);
        let m = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let p = pinv(&m, 0.0).unwrap();
        let mpm = m.matmul(&p).matmul(&m);
        assert!(mpm.sub(&m).max_abs() < 1e-9);
        let pmp = p.matmul(&m).matmul(&p);
        assert!(pmp.sub(&p).max_abs() < 1e-8);
        let mp = m.matmul(&p);
        assert!(mp.sub(&mp.transpose()).max_abs() < 1e-8);
        let pm = p.matmul(&m);
        assert!(pm.sub(&pm.transpose()).max_abs() < 1e-8);
    }
}
