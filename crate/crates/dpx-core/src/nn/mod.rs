//! Minimal f64 neural-network kernels for 1-d convolutional networks.
//!
//! Everything is deterministic: batched work is split into fixed-size
//! chunks whose partial results are reduced in chunk order (see
//! [`crate::exec`]), and the GEMM backend is single-threaded, so training
//! produces bit-identical parameters for any thread count.

mod adam;
mod bn;
mod conv;
mod linear;
mod pool;

pub use adam::{cosine_lr, Adam};
pub use bn::{BatchNorm1d, BnCache};
pub use conv::Conv1d;
pub use linear::Linear;
pub use pool::{global_max_pool, global_max_unpool, MaxPool1d};

use rand::Rng;

/// Dense (batch, channels, length) tensor; row (i, c) is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, c: usize, l: usize) -> Self {
        Tensor3 { n, c, l, data: vec![0.0; n * c * l] }
    }

    #[inline]
    pub fn row(&self, i: usize, ch: usize) -> &[f64] {
        let off = (i * self.c + ch) * self.l;
        &self.data[off..off + self.l]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize, ch: usize) -> &mut [f64] {
        let off = (i * self.c + ch) * self.l;
        &mut self.data[off..off + self.l]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.l
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_init<R: Rng>(data: &mut [f64], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in data.iter_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// In-place ReLU.
pub fn relu(data: &mut [f64]) {
    for v in data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// ReLU gradient using the forward *output* as the mask: dx = dy where
/// y > 0. Modifies `dy` in place.
pub fn relu_backward(y: &[f64], dy: &mut [f64]) {
    debug_assert_eq!(y.len(), dy.len());
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rows_are_contiguous_slices() {
        let mut t = Tensor3::zeros(2, 3, 4);
        t.row_mut(1, 2)[3] = 7.0;
        assert_eq!(t.data[(1 * 3 + 2) * 4 + 3], 7.0);
        assert_eq!(t.row(1, 2)[3], 7.0);
    }

    #[test]
    fn relu_and_its_gradient_agree() {
        let mut x = vec![-1.0, 0.0, 2.0, -0.5, 3.0];
        let y = {
            let mut y = x.clone();
            relu(&mut y);
            y
        };
        assert_eq!(y, vec![0.0, 0.0, 2.0, 0.0, 3.0]);
        let mut dy = vec![1.0; 5];
        relu_backward(&y, &mut dy);
        assert_eq!(dy, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        x[0] = 0.0; // silence unused warning path
        let _ = x;
    }
}
