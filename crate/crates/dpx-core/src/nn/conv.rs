//! 1-d convolution (no bias) via per-tap GEMM on strided views.

use rand::Rng;

use super::{fan_in_init, Tensor3};
use crate::exec;

/// Samples per work chunk when accumulating weight gradients; fixed so
/// the chunk-order reduction is identical for any thread count.
const GRAD_CHUNK: usize = 8;

/// 1-d convolution layer. Weight layout: `w[(co * cin + ci) * k + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: Vec<f64>,
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = vec![0.0; cout * cin * k];
        fan_in_init(&mut w, cin * k, rng);
        Conv1d { w, cout, cin, k, stride, pad }
    }

    pub fn l_out(&self, l_in: usize) -> usize {
        (l_in + 2 * self.pad - self.k) / self.stride + 1
    }

    fn pad_input(&self, x: &Tensor3) -> Tensor3 {
        if self.pad == 0 {
            return x.clone();
        }
        let lp = x.l + 2 * self.pad;
        let mut xp = Tensor3::zeros(x.n, x.c, lp);
        for i in 0..x.n {
            for ch in 0..x.c {
                xp.row_mut(i, ch)[self.pad..self.pad + x.l].copy_from_slice(x.row(i, ch));
            }
        }
        xp
    }

    /// y[i, co, p] = sum_{ci, t} w[co, ci, t] * x[i, ci, p*s + t - pad]
    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.cin);
        let lout = self.l_out(x.l);
        let xp = self.pad_input(x);
        let lp = xp.l;
        let mut y = Tensor3::zeros(x.n, self.cout, lout);

        let (cout, cin, k, s) = (self.cout, self.cin, self.k, self.stride);
        let w = &self.w;
        let xp_data = &xp.data;
        exec::for_each_chunk_mut(&mut y.data, cout * lout, |i, yi| {
            for t in 0..k {
                let a = w[t..].as_ptr();
                let b = xp_data[i * cin * lp + t..].as_ptr();
                let beta = if t == 0 { 0.0 } else { 1.0 };
                // A: (cout x cin) tap-t slice of w; B: strided input view
                // B[ci, p] = xp[i, ci, t + p*s]; C: this sample's output.
                unsafe {
                    matrixmultiply::dgemm(
                        cout,
                        cin,
                        lout,
                        1.0,
                        a,
                        (cin * k) as isize,
                        k as isize,
                        b,
                        lp as isize,
                        s as isize,
                        beta,
                        yi.as_mut_ptr(),
                        lout as isize,
                        1,
                    );
                }
            }
        });
        y
    }

    /// Backward pass: accumulates the weight gradient into `dw` (same
    /// layout as `w`) and returns the input gradient.
    pub fn backward(&self, x: &Tensor3, dy: &Tensor3, dw: &mut [f64]) -> Tensor3 {
        assert_eq!(x.c, self.cin);
        assert_eq!(dy.c, self.cout);
        assert_eq!(dy.l, self.l_out(x.l));
        assert_eq!(dw.len(), self.w.len());
        let xp = self.pad_input(x);
        let lp = xp.l;
        let lout = dy.l;
        let (cout, cin, k, s, pad) = (self.cout, self.cin, self.k, self.stride, self.pad);

        // dW: fixed sample chunks -> partial buffers -> ordered reduce.
        let xp_data = &xp.data;
        let dy_data = &dy.data;
        let partials = exec::map_ranges(x.n, GRAD_CHUNK, |r| {
            let mut part = vec![0.0; cout * cin * k];
            for i in r {
                for t in 0..k {
                    let a = dy_data[i * cout * lout..].as_ptr();
                    let b = xp_data[i * cin * lp + t..].as_ptr();
                    // C[co, ci] += sum_p dy[co, p] * xp[ci, t + p*s]
                    unsafe {
                        matrixmultiply::dgemm(
                            cout,
                            lout,
                            cin,
                            1.0,
                            a,
                            lout as isize,
                            1,
                            b,
                            s as isize,
                            lp as isize,
                            1.0,
                            part[t..].as_mut_ptr(),
                            (cin * k) as isize,
                            k as isize,
                        );
                    }
                }
            }
            part
        });
        for part in partials {
            for (d, p) in dw.iter_mut().zip(&part) {
                *d += p;
            }
        }

        // dX via the padded scratch, then strip the padding.
        let mut dxp = Tensor3::zeros(x.n, cin, lp);
        let w = &self.w;
        exec::for_each_chunk_mut(&mut dxp.data, cin * lp, |i, dxi| {
            for t in 0..k {
                let a = w[t..].as_ptr(); // A^T view: (cin x cout)
                let b = dy_data[i * cout * lout..].as_ptr();
                // C[ci, t + p*s] += sum_co w[co, ci, t] * dy[co, p]
                unsafe {
                    matrixmultiply::dgemm(
                        cin,
                        cout,
                        lout,
                        1.0,
                        a,
                        k as isize,
                        (cin * k) as isize,
                        b,
                        lout as isize,
                        1,
                        1.0,
                        dxi[t..].as_mut_ptr(),
                        lp as isize,
                        s as isize,
                    );
                }
            }
        });

        let mut dx = Tensor3::zeros(x.n, cin, x.l);
        for i in 0..x.n {
            for ch in 0..cin {
                dx.row_mut(i, ch).copy_from_slice(&dxp.row(i, ch)[pad..pad + x.l]);
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

    /// Naive direct convolution used as the reference.
    fn conv_ref(c: &Conv1d, x: &Tensor3) -> Tensor3 {
        let lout = c.l_out(x.l);
        let mut y = Tensor3::zeros(x.n, c.cout, lout);
        for i in 0..x.n {
            for co in 0..c.cout {
                for p in 0..lout {
                    let mut acc = 0.0;
                    for ci in 0..c.cin {
                        for t in 0..c.k {
                            let pos = (p * c.stride + t) as isize - c.pad as isize;
                            if pos >= 0 && (pos as usize) < x.l {
                                acc += c.w[(co * c.cin + ci) * c.k + t]
                                    * x.row(i, ci)[pos as usize];
                            }
                        }
                    }
                    y.row_mut(i, co)[p] = acc;
                }
            }
        }
        y
    }

    fn rand_tensor(n: usize, c: usize, l: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        let mut t = Tensor3::zeros(n, c, l);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cout, cin, k, s, p, l) in &[
            (4, 1, 7, 2, 3, 37),
            (3, 5, 3, 1, 1, 20),
            (8, 4, 1, 1, 0, 16),
            (2, 3, 3, 2, 1, 11),
        ] {
            let conv = Conv1d::new(cout, cin, k, s, p, &mut rng);
            let x = rand_tensor(2, cin, l, &mut rng);
            let y = conv.forward(&x);
            let want = conv_ref(&conv, &x);
            assert_eq!(y.l, want.l);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv1d::new(3, 2, 3, 2, 1, &mut rng);
        let x = rand_tensor(2, 2, 9, &mut rng);
        // Scalar loss: sum(y * r) for a fixed random projection r.
        let y0 = conv.forward(&x);
        let r: Vec<f64> = (0..y0.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut dy = y0.clone();
        dy.data.copy_from_slice(&r);
        let mut dw = vec![0.0; conv.w.len()];
        let dx = conv.backward(&x, &dy, &mut dw);

        let eps = 1e-6;
        for idx in 0..conv.w.len() {
            let orig = conv.w[idx];
            conv.w[idx] = orig + eps;
            let lp: f64 = conv.forward(&x).data.iter().zip(&r).map(|(a, b)| a * b).sum();
            conv.w[idx] = orig - eps;
            let lm: f64 = conv.forward(&x).data.iter().zip(&r).map(|(a, b)| a * b).sum();
            conv.w[idx] = orig;
            assert_relative_eq!(dw[idx], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
        }
        let mut x2 = x.clone();
        for idx in 0..x.data.len() {
            let orig = x2.data[idx];
            x2.data[idx] = orig + eps;
            let lp: f64 = conv.forward(&x2).data.iter().zip(&r).map(|(a, b)| a * b).sum();
            x2.data[idx] = orig - eps;
            let lm: f64 = conv.forward(&x2).data.iter().zip(&r).map(|(a, b)| a * b).sum();
            x2.data[idx] = orig;
            assert_relative_eq!(dx.data[idx], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn output_length_follows_the_usual_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv1d::new(1, 1, 7, 2, 3, &mut rng);
        assert_eq!(conv.l_out(1300), 650);
        let conv = Conv1d::new(1, 1, 3, 2, 1, &mut rng);
        assert_eq!(conv.l_out(650), 325);
        assert_eq!(conv.l_out(325), 163);
    }
}
