//! State-augmented neural Koopman model: a 2x256 ReLU encoder with one
//! residual connection, bias-free latent matrices A and B, and the fixed
//! projection P = [I | 0] reading the physical state back out.

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{gemm, gemm_nt, gemm_tn, nearest_orthogonal, svd, Matrix, Rng};
use serde_json::json;
use std::ops::Range;
use std::path::Path;

pub const HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_x: usize,
    pub n_u: usize,
    pub n_enc: usize,
    pub n: usize,
}

impl Layout {
    pub fn new(n_x: usize, n_u: usize, n_mult: usize) -> Self {
        let n_enc = n_mult * n_x;
        Layout {
            n_x,
            n_u,
            n_enc,
            n: n_x + n_enc,
        }
    }

    pub fn w1(&self) -> Range<usize> {
        0..HIDDEN * self.n_x
    }
    pub fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + HIDDEN
    }
    pub fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + HIDDEN * HIDDEN
    }
    pub fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + HIDDEN
    }
    pub fn w3(&self) -> Range<usize> {
        let s = self.b2().end;
        s..s + self.n_enc * HIDDEN
    }
    pub fn a(&self) -> Range<usize> {
        let s = self.w3().end;
        s..s + self.n * self.n
    }
    pub fn b(&self) -> Range<usize> {
        let s = self.a().end;
        s..s + self.n * self.n_u
    }
    pub fn len(&self) -> usize {
        self.b().end
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub n_x: usize,
    pub n_u: usize,
    pub n_mult: usize,
    /// Flat parameter vector in [w1, b1, w2, b2, w3, a, b] order.
    pub params: Vec<f64>,
}

/// Forward activations kept for backprop.
pub struct EncodeCache {
    pub x: Matrix,
    pub h1: Matrix,
    pub relu2: Matrix,
    pub h2: Matrix,
    pub z: Matrix,
}

impl KoopmanModel {
    pub fn layout(&self) -> Layout {
        Layout::new(self.n_x, self.n_u, self.n_mult)
    }

    pub fn n(&self) -> usize {
        self.layout().n
    }

    pub fn n_enc(&self) -> usize {
        self.layout().n_enc
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slice(&self, r: Range<usize>) -> &[f64] {
        &self.params[r]
    }

    pub fn a_matrix(&self) -> Matrix {
        let l = self.layout();
        Matrix::from_vec(l.n, l.n, self.slice(l.a()).to_vec()).unwrap()
    }

    pub fn b_matrix(&self) -> Matrix {
        let l = self.layout();
        Matrix::from_vec(l.n, l.n_u, self.slice(l.b()).to_vec()).unwrap()
    }

    pub fn set_a(&mut self, a: &Matrix) {
        let l = self.layout();
        assert_eq!((a.rows(), a.cols()), (l.n, l.n));
        self.params[l.a()].copy_from_slice(a.data());
    }

    pub fn set_b(&mut self, b: &Matrix) {
        let l = self.layout();
        assert_eq!((b.rows(), b.cols()), (l.n, l.n_u));
        self.params[l.b()].copy_from_slice(b.data());
    }

    /// Zero the encoder output layer so Psi == 0 and z = [x; 0].
    pub fn zero_features(&mut self) {
        let l = self.layout();
        for v in &mut self.params[l.w3()] {
            *v = 0.0;
        }
    }

    /// Initialization: scaled-uniform fan-in for the hidden layers, an
    /// orthogonal final encoder layer, A as a 0.99-scaled orthogonal
    /// projection of a Gaussian draw, B as a small Gaussian.
    pub fn init(n_x: usize, n_u: usize, n_mult: usize, seed: u64) -> Result<Self> {
        if n_mult < 1 {
            return Err(Error::Config("n_mult must be >= 1".into()));
        }
        let layout = Layout::new(n_x, n_u, n_mult);
        let mut params = vec![0.0; layout.len()];

        let fill_uniform = |range: Range<usize>, bound: f64, stream: u64, params: &mut Vec<f64>| {
            let mut rng = Rng::substream(seed, stream);
            for v in &mut params[range] {
                *v = rng.uniform(-bound, bound);
            }
        };
        let bound1 = 1.0 / (n_x as f64).sqrt();
        fill_uniform(layout.w1(), bound1, 1, &mut params);
        fill_uniform(layout.b1(), bound1, 2, &mut params);
        let bound2 = 1.0 / (HIDDEN as f64).sqrt();
        fill_uniform(layout.w2(), bound2, 3, &mut params);
        fill_uniform(layout.b2(), bound2, 4, &mut params);

        // orthogonal final encoder layer: SVD of a Gaussian with singular values set to 1
        let mut rng3 = Rng::substream(seed, 5);
        let g3 = Matrix::from_fn(layout.n_enc, HIDDEN, |_, _| rng3.normal());
        let (u, _s, vt) = svd(&g3)?;
        let w3 = u.matmul(&vt);
        params[layout.w3()].copy_from_slice(w3.data());

        let mut rng_a = Rng::substream(seed, 6);
        let ga = Matrix::from_fn(layout.n, layout.n, |_, _| rng_a.normal());
        let a = nearest_orthogonal(&ga)?.scale(0.99);
        params[layout.a()].copy_from_slice(a.data());

        let mut rng_b = Rng::substream(seed, 7);
        for v in &mut params[layout.b()] {
            *v = 0.01 * rng_b.normal();
        }

        Ok(KoopmanModel {
            n_x,
            n_u,
            n_mult,
            params,
        })
    }

    /// Encode a batch of states given as columns of `x` (n_x rows, N cols).
    pub fn encode_batch(&self, x: &Matrix) -> EncodeCache {
        assert_eq!(x.rows(), self.n_x);
        let l = self.layout();
        let cols = x.cols();

        // h1 = relu(W1 x + b1)
        let mut h1 = Matrix::zeros(HIDDEN, cols);
        gemm(HIDDEN, l.n_x, cols, 1.0, self.slice(l.w1()), x.data(), 0.0, h1.data_mut());
        let b1 = self.slice(l.b1());
        for i in 0..HIDDEN {
            let bias = b1[i];
            for v in &mut h1.data_mut()[i * cols..(i + 1) * cols] {
                *v = (*v + bias).max(0.0);
            }
        }

        // h2 = h1 + relu(W2 h1 + b2)
        let mut relu2 = Matrix::zeros(HIDDEN, cols);
        gemm(HIDDEN, HIDDEN, cols, 1.0, self.slice(l.w2()), h1.data(), 0.0, relu2.data_mut());
        let b2 = self.slice(l.b2());
        for i in 0..HIDDEN {
            let bias = b2[i];
            for v in &mut relu2.data_mut()[i * cols..(i + 1) * cols] {
                *v = (*v + bias).max(0.0);
            }
        }
        let h2 = h1.add(&relu2);

        // z = [x; W3 h2]
        let mut z = Matrix::zeros(l.n, cols);
        z.data_mut()[..l.n_x * cols].copy_from_slice(x.data());
        gemm(
            l.n_enc,
            HIDDEN,
            cols,
            1.0,
            self.slice(l.w3()),
            h2.data(),
            0.0,
            &mut z.data_mut()[l.n_x * cols..],
        );

        EncodeCache {
            x: x.clone(),
            h1,
            relu2,
            h2,
            z,
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let xm = Matrix::from_vec(self.n_x, 1, x.to_vec()).unwrap();
        self.encode_batch(&xm).z.into_vec()
    }

    /// Backprop `d_z` (n x N) through the encoder. Accumulates encoder
    /// parameter gradients into `grads` (same layout as `params`) and
    /// returns the gradient with respect to the input states.
    pub fn encode_backward(&self, cache: &EncodeCache, d_z: &Matrix, grads: &mut [f64]) -> Matrix {
        let l = self.layout();
        let cols = cache.x.cols();
        assert_eq!((d_z.rows(), d_z.cols()), (l.n, cols));
        assert_eq!(grads.len(), l.len());

        // split dz into the pass-through state part and the feature part
        let d_psi = &d_z.data()[l.n_x * cols..];

        // w3 grad: dW3 = dPsi * h2^T
        gemm_nt(
            l.n_enc,
            cols,
            HIDDEN,
            1.0,
            d_psi,
            cache.h2.data(),
            1.0,
            &mut grads[l.w3()],
        );
        // dH2 = W3^T dPsi
        let mut d_h2 = Matrix::zeros(HIDDEN, cols);
        gemm_tn(
            HIDDEN,
            l.n_enc,
            cols,
            1.0,
            self.slice(l.w3()),
            d_psi,
            0.0,
            d_h2.data_mut(),
        );

        // residual block: h2 = h1 + relu(pre2)
        let mut d_pre2 = d_h2.clone();
        for (dv, &r) in d_pre2.data_mut().iter_mut().zip(cache.relu2.data()) {
            if r <= 0.0 {
                *dv = 0.0;
            }
        }
        gemm_nt(
            HIDDEN,
            cols,
            HIDDEN,
            1.0,
            d_pre2.data(),
            cache.h1.data(),
            1.0,
            &mut grads[l.w2()],
        );
        for i in 0..HIDDEN {
            grads[l.b2()][i] += d_pre2.row(i).iter().sum::<f64>();
        }
        // dH1 = dH2 + W2^T dPre2
        let mut d_h1 = d_h2;
        gemm_tn(
            HIDDEN,
            HIDDEN,
            cols,
            1.0,
            self.slice(l.w2()),
            d_pre2.data(),
            1.0,
            d_h1.data_mut(),
        );

        let mut d_pre1 = d_h1;
        for (dv, &h) in d_pre1.data_mut().iter_mut().zip(cache.h1.data()) {
            if h <= 0.0 {
                *dv = 0.0;
            }
        }
        gemm_nt(
            HIDDEN,
            cols,
            l.n_x,
            1.0,
            d_pre1.data(),
            cache.x.data(),
            1.0,
            &mut grads[l.w1()],
        );
        for i in 0..HIDDEN {
            grads[l.b1()][i] += d_pre1.row(i).iter().sum::<f64>();
        }

        // dX = W1^T dPre1 + pass-through part of dz
        let mut d_x = Matrix::zeros(l.n_x, cols);
        d_x.data_mut().copy_from_slice(&d_z.data()[..l.n_x * cols]);
        gemm_tn(
            l.n_x,
            HIDDEN,
            cols,
            1.0,
            self.slice(l.w1()),
            d_pre1.data(),
            1.0,
            d_x.data_mut(),
        );
        d_x
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": "koopman-lab/model",
            "version": 1,
            "n_x": self.n_x,
            "n_u": self.n_u,
            "n_mult": self.n_mult,
        });
        io::write_container(path, header, &[("params", &self.params)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = io::read_container(path)?;
        let format = io::require_field(&header, "format")?;
        if format != "koopman-lab/model" {
            return Err(Error::Format(format!("unexpected format tag {format}")));
        }
        let n_x = io::require_field(&header, "n_x")?.as_u64().unwrap_or(0) as usize;
        let n_u = io::require_field(&header, "n_u")?.as_u64().unwrap_or(0) as usize;
        let n_mult = io::require_field(&header, "n_mult")?.as_u64().unwrap_or(0) as usize;
        let params = io::find_block(&blocks, "params")?.to_vec();
        let layout = Layout::new(n_x, n_u, n_mult);
        if params.len() != layout.len() {
            return Err(Error::Format(format!(
                "param block length {} does not match dims (expected {})",
                params.len(),
                layout.len()
            )));
        }
        Ok(KoopmanModel {
            n_x,
            n_u,
            n_mult,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_deviation};

    #[test]
    fn init_a_singular_values() {
        let model = KoopmanModel::init(2, 1, 2, 42).unwrap();
        let (_, s, _) = svd(&model.a_matrix()).unwrap();
        for v in s {
            assert!((v - 0.99).abs() < 1e-9, "sigma = {v}");
        }
    }

    #[test]
    fn state_augmentation_identity() {
        let model = KoopmanModel::init(3, 2, 4, 7).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let z = model.encode(&x);
            assert_eq!(&z[..3], x.as_slice());
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = KoopmanModel::init(2, 1, 4, 99).unwrap();
        let b = KoopmanModel::init(2, 1, 4, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_w3_gives_zero_features() {
        let mut model = KoopmanModel::init(2, 1, 2, 3).unwrap();
        model.zero_features();
        let z = model.encode(&[0.5, -0.5]);
        assert_eq!(&z[2..], &[0.0; 4]);
    }

    #[test]
    fn encode_jacobian_matches_finite_differences() {
        let model = KoopmanModel::init(2, 1, 1, 11).unwrap();
        let l = model.layout();
        let x0 = vec![0.37, -0.82];
        // probe J^T v for a few random v via backprop, compare with FD of v . encode(x)
        let mut rng = Rng::new(5);
        for _ in 0..4 {
            let v: Vec<f64> = (0..l.n).map(|_| rng.normal()).collect();
            let cache = model.encode_batch(&Matrix::from_vec(2, 1, x0.clone()).unwrap());
            let dz = Matrix::from_vec(l.n, 1, v.clone()).unwrap();
            let mut grads = vec![0.0; l.len()];
            let dx = model.encode_backward(&cache, &dz, &mut grads);
            let fd = finite_diff_grad(
                |x| {
                    model
                        .encode(x)
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                },
                &x0,
                1e-6,
            )
            .unwrap();
            let dev = max_rel_deviation(dx.data(), &fd);
            assert!(dev < 1e-5, "deviation {dev}");
        }
    }

    #[test]
    fn save_load_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.klb");
        let model = KoopmanModel::init(2, 1, 2, 5).unwrap();
        model.save(&p).unwrap();
        let back = KoopmanModel::load(&p).unwrap();
        assert_eq!(model, back);
        let x = [0.1, 0.2];
        assert_eq!(model.encode(&x), back.encode(&x));
    }

    #[test]
    fn load_rejects_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.klb");
        let model = KoopmanModel::init(2, 1, 2, 5).unwrap();
        let header = json!({
            "format": "koopman-lab/model",
            "version": 1,
            "n_x": 3,
            "n_u": 1,
            "n_mult": 2,
        });
        crate::io::write_container(&p, header, &[("params", &model.params)]).unwrap();
        assert!(KoopmanModel::load(&p).is_err());
    }
}
