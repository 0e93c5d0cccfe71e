//! Central-difference gradients, used to verify analytic backprop.

use crate::error::{Error, Result};

pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f non-finite at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Max relative deviation between two gradient vectors, with an absolute
/// floor so near-zero entries do not dominate.
pub fn max_rel_deviation(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs() / scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        for v in g {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn mixed_analytic() {
        let g = finite_diff_grad(|x| x[0].sin() + x[1] * x[1], &[0.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_reported() {
        let err = finite_diff_grad(|x| 1.0 / (x[0] - 1.0), &[1.0], 1e-18).unwrap_err();
        assert!(err.to_string().contains("coordinate 0"));
    }
}
