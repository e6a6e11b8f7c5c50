//! Max pooling (windowed and global) with argmax caches for backprop.

use super::{Mat, Tensor3};

/// Windowed 1-d max pool. Padding is virtual negative infinity: windows
/// are clipped to the real signal and must overlap it (`pad < k`).
#[derive(Debug, Clone, Copy)]
pub struct MaxPool1d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool1d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        assert!(pad < k, "a window must always contain at least one sample");
        MaxPool1d { k, stride, pad }
    }

    pub fn l_out(&self, l_in: usize) -> usize {
        (l_in + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Returns the pooled tensor and, per output element, the input
    /// position (within its row) that supplied the max. Ties pick the
    /// leftmost position.
    pub fn forward(&self, x: &Tensor3) -> (Tensor3, Vec<u32>) {
        let lout = self.l_out(x.l);
        let mut y = Tensor3::zeros(x.n, x.c, lout);
        let mut argmax = vec![0u32; x.n * x.c * lout];
        for i in 0..x.n {
            for ch in 0..x.c {
                let row = x.row(i, ch);
                let yrow = y.row_mut(i, ch);
                let abase = (i * x.c + ch) * lout;
                for p in 0..lout {
                    let start = (p * self.stride) as isize - self.pad as isize;
                    let lo = start.max(0) as usize;
                    let hi = ((start + self.k as isize) as usize).min(x.l);
                    let mut best = lo;
                    for j in lo + 1..hi {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    yrow[p] = row[best];
                    argmax[abase + p] = best as u32;
                }
            }
        }
        (y, argmax)
    }

    /// Scatters output gradients back to the argmax positions.
    pub fn backward(&self, l_in: usize, dy: &Tensor3, argmax: &[u32]) -> Tensor3 {
        assert_eq!(dy.data.len(), argmax.len());
        let mut dx = Tensor3::zeros(dy.n, dy.c, l_in);
        for i in 0..dy.n {
            for ch in 0..dy.c {
                let drow = dy.row(i, ch);
                let abase = (i * dy.c + ch) * dy.l;
                let out = dx.row_mut(i, ch);
                for p in 0..dy.l {
                    out[argmax[abase + p] as usize] += drow[p];
                }
            }
        }
        dx
    }
}

/// Collapses each (sample, channel) row to its maximum. Returns the
/// (n x c) matrix and the winning position per row.
pub fn global_max_pool(x: &Tensor3) -> (Mat, Vec<u32>) {
    let mut y = Mat::zeros(x.n, x.c);
    let mut argmax = vec![0u32; x.n * x.c];
    for i in 0..x.n {
        for ch in 0..x.c {
            let row = x.row(i, ch);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            y.row_mut(i)[ch] = row[best];
            argmax[i * x.c + ch] = best as u32;
        }
    }
    (y, argmax)
}

/// Backward of [`global_max_pool`].
pub fn global_max_unpool(dy: &Mat, argmax: &[u32], l: usize) -> Tensor3 {
    assert_eq!(dy.rows * dy.cols, argmax.len());
    let mut dx = Tensor3::zeros(dy.rows, dy.cols, l);
    for i in 0..dy.rows {
        for ch in 0..dy.cols {
            dx.row_mut(i, ch)[argmax[i * dy.cols + ch] as usize] += dy.row(i)[ch];
        }
    }
    dx
}
