//! Fully connected layer backed by GEMM.

use rand::Rng;

use super::{fan_in_init, Mat};

/// Dense layer `y = x W^T + b`. Weight layout: `w[o * n_in + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let mut w = vec![0.0; n_out * n_in];
        let mut b = vec![0.0; n_out];
        fan_in_init(&mut w, n_in, rng);
        fan_in_init(&mut b, n_in, rng);
        Linear { w, b, n_in, n_out }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.n_in);
        let mut y = Mat::zeros(x.rows, self.n_out);
        if x.rows > 0 {
            // B is W^T expressed through strides; no transpose copy.
            unsafe {
                matrixmultiply::dgemm(
                    x.rows,
                    self.n_in,
                    self.n_out,
                    1.0,
                    x.data.as_ptr(),
                    self.n_in as isize,
                    1,
                    self.w.as_ptr(),
                    1,
                    self.n_in as isize,
                    0.0,
                    y.data.as_mut_ptr(),
                    self.n_out as isize,
                    1,
                );
            }
        }
        for i in 0..y.rows {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates into `dw`/`db`, returns dx. Gradients are produced by
    /// single GEMM calls (plus an ordered bias sum), so they are
    /// bit-identical regardless of thread count.
    pub fn backward(&self, x: &Mat, dy: &Mat, dw: &mut [f64], db: &mut [f64]) -> Mat {
        assert_eq!(x.cols, self.n_in);
        assert_eq!(dy.cols, self.n_out);
        assert_eq!(x.rows, dy.rows);
        assert_eq!(dw.len(), self.w.len());
        assert_eq!(db.len(), self.b.len());

        if x.rows > 0 {
            // dW += dY^T X
            unsafe {
                matrixmultiply::dgemm(
                    self.n_out,
                    x.rows,
                    self.n_in,
                    1.0,
                    dy.data.as_ptr(),
                    1,
                    self.n_out as isize,
                    x.data.as_ptr(),
                    self.n_in as isize,
                    1,
                    1.0,
                    dw.as_mut_ptr(),
                    self.n_in as isize,
                    1,
                );
            }
        }
        for i in 0..dy.rows {
            for (d, g) in db.iter_mut().zip(dy.row(i)) {
                *d += g;
            }
        }

        let mut dx = Mat::zeros(x.rows, self.n_in);
        if x.rows > 0 {
            // dX = dY W
            unsafe {
                matrixmultiply::dgemm(
                    x.rows,
                    self.n_out,
                    self.n_in,
                    1.0,
                    dy.data.as_ptr(),
                    self.n_out as isize,
                    1,
                    self.w.as_ptr(),
                    self.n_in as isize,
                    1,
                    0.0,
                    dx.data.as_mut_ptr(),
                    self.n_in as isize,
                    1,
                );
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let lin = Linear::new(5, 3, &mut rng);
        let x = rand_mat(4, 5, &mut rng);
        let y = lin.forward(&x);
        for i in 0..4 {
            for o in 0..3 {
                let want: f64 = (0..5).map(|j| x.row(i)[j] * lin.w[o * 5 + j]).sum::<f64>()
                    + lin.b[o];
                assert_relative_eq!(y.row(i)[o], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = rand_mat(5, 4, &mut rng);
        let r: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |lin: &Linear, x: &Mat, r: &[f64]| -> f64 {
            lin.forward(x).data.iter().zip(r).map(|(a, b)| a * b).sum()
        };

        let y = lin.forward(&x);
        let mut dy = y.clone();
        dy.data.copy_from_slice(&r);
        let mut dw = vec![0.0; lin.w.len()];
        let mut db = vec![0.0; lin.b.len()];
        let dx = lin.backward(&x, &dy, &mut dw, &mut db);

        let eps = 1e-6;
        for idx in 0..lin.w.len() {
            let orig = lin.w[idx];
            lin.w[idx] = orig + eps;
            let lp = loss(&lin, &x, &r);
            lin.w[idx] = orig - eps;
            let lm = loss(&lin, &x, &r);
            lin.w[idx] = orig;
            assert_relative_eq!(dw[idx], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
        }
        for idx in 0..lin.b.len() {
            let orig = lin.b[idx];
            lin.b[idx] = orig + eps;
            let lp = loss(&lin, &x, &r);
            lin.b[idx] = orig - eps;
            let lm = loss(&lin, &x, &r);
            lin.b[idx] = orig;
            assert_relative_eq!(db[idx], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
        }
        let mut x2 = x.clone();
        for idx in 0..x.data.len() {
            let orig = x2.data[idx];
            x2.data[idx] = orig + eps;
            let lp = loss(&lin, &x2, &r);
            x2.data[idx] = orig - eps;
            let lm = loss(&lin, &x2, &r);
            x2.data[idx] = orig;
            assert_relative_eq!(dx.data[idx], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn empty_batch_produces_empty_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let lin = Linear::new(4, 3, &mut rng);
        let x = Mat::zeros(0, 4);
        let y = lin.forward(&x);
        assert_eq!(y.rows, 0);
    }
}
