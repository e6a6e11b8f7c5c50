//! Batch normalisation over (sample, channel, position) tensors.

use super::Tensor3;
use crate::exec;

/// Samples per chunk for batch-statistic reductions (fixed for
/// determinism across thread counts).
const STAT_CHUNK: usize = 8;

/// Per-channel batch norm. Normalisation uses the biased batch variance;
/// the running variance stores the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub c: usize,
}

/// Values saved by the training forward pass for the backward pass.
pub struct BnCache {
    pub xhat: Tensor3,
    pub inv_std: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(c: usize) -> Self {
        BatchNorm1d {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-5,
            c,
        }
    }

    /// Per-channel (sum, sum of squares) over all samples and positions.
    fn batch_moments(&self, x: &Tensor3) -> Vec<(f64, f64)> {
        let c = self.c;
        let partials = exec::map_ranges(x.n, STAT_CHUNK, |r| {
            let mut acc = vec![(0.0, 0.0); c];
            for i in r {
                for ch in 0..c {
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for &v in x.row(i, ch) {
                        s += v;
                        s2 += v * v;
                    }
                    acc[ch].0 += s;
                    acc[ch].1 += s2;
                }
            }
            acc
        });
        let mut acc = vec![(0.0, 0.0); c];
        for part in partials {
            for (a, p) in acc.iter_mut().zip(&part) {
                a.0 += p.0;
                a.1 += p.1;
            }
        }
        acc
    }

    pub fn forward_train(&mut self, x: &Tensor3) -> (Tensor3, BnCache) {
        assert_eq!(x.c, self.c);
        let cnt = (x.n * x.l) as f64;
        assert!(cnt >= 2.0, "batch norm needs at least two values per channel");
        let moments = self.batch_moments(x);
        let mut mean = vec![0.0; self.c];
        let mut inv_std = vec![0.0; self.c];
        for ch in 0..self.c {
            let m = moments[ch].0 / cnt;
            let var = (moments[ch].1 / cnt - m * m).max(0.0);
            mean[ch] = m;
            inv_std[ch] = 1.0 / (var + self.eps).sqrt();
            let unbiased = var * cnt / (cnt - 1.0);
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * m;
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }

        let mut xhat = Tensor3::zeros(x.n, x.c, x.l);
        let sample = x.c * x.l;
        let (c, l) = (x.c, x.l);
        let xd = &x.data;
        exec::for_each_chunk_mut(&mut xhat.data, sample, |i, xh| {
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let src = &xd[i * sample + ch * l..i * sample + (ch + 1) * l];
                for (o, &v) in xh[ch * l..(ch + 1) * l].iter_mut().zip(src) {
                    *o = (v - m) * is;
                }
            }
        });

        let mut y = Tensor3::zeros(x.n, x.c, x.l);
        let gamma = &self.gamma;
        let beta = &self.beta;
        let xhd = &xhat.data;
        exec::for_each_chunk_mut(&mut y.data, sample, |i, yi| {
            for ch in 0..c {
                let (g, b) = (gamma[ch], beta[ch]);
                let src = &xhd[i * sample + ch * l..i * sample + (ch + 1) * l];
                for (o, &v) in yi[ch * l..(ch + 1) * l].iter_mut().zip(src) {
                    *o = g * v + b;
                }
            }
        });
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.c);
        let mut y = Tensor3::zeros(x.n, x.c, x.l);
        let sample = x.c * x.l;
        let (c, l) = (x.c, x.l);
        let xd = &x.data;
        let mut scale = vec![0.0; c];
        let mut shift = vec![0.0; c];
        for ch in 0..c {
            let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            scale[ch] = self.gamma[ch] * is;
            shift[ch] = self.beta[ch] - self.running_mean[ch] * scale[ch];
        }
        exec::for_each_chunk_mut(&mut y.data, sample, |i, yi| {
            for ch in 0..c {
                let src = &xd[i * sample + ch * l..i * sample + (ch + 1) * l];
                for (o, &v) in yi[ch * l..(ch + 1) * l].iter_mut().zip(src) {
                    *o = scale[ch] * v + shift[ch];
                }
            }
        });
        y
    }

    /// Backward through the training-mode forward (batch statistics
    /// included). Accumulates into `dgamma`/`dbeta`, returns dx.
    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Tensor3,
        dgamma: &mut [f64],
        dbeta: &mut [f64],
    ) -> Tensor3 {
        let xhat = &cache.xhat;
        assert_eq!(dy.c, self.c);
        assert_eq!(dy.data.len(), xhat.data.len());
        let cnt = (dy.n * dy.l) as f64;
        let (c, l) = (dy.c, dy.l);
        let sample = c * l;

        // s1[c] = sum dy, s2[c] = sum dy * xhat.
        let dyd = &dy.data;
        let xhd = &xhat.data;
        let partials = exec::map_ranges(dy.n, STAT_CHUNK, |r| {
            let mut acc = vec![(0.0, 0.0); c];
            for i in r {
                for ch in 0..c {
                    let d = &dyd[i * sample + ch * l..i * sample + (ch + 1) * l];
                    let h = &xhd[i * sample + ch * l..i * sample + (ch + 1) * l];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for (a, b) in d.iter().zip(h) {
                        s1 += a;
                        s2 += a * b;
                    }
                    acc[ch].0 += s1;
                    acc[ch].1 += s2;
                }
            }
            acc
        });
        let mut s1 = vec![0.0; c];
        let mut s2 = vec![0.0; c];
        for part in partials {
            for ch in 0..c {
                s1[ch] += part[ch].0;
                s2[ch] += part[ch].1;
            }
        }
        for ch in 0..c {
            dbeta[ch] += s1[ch];
            dgamma[ch] += s2[ch];
        }

        let mut dx = Tensor3::zeros(dy.n, c, l);
        let gamma = &self.gamma;
        let inv_std = &cache.inv_std;
        exec::for_each_chunk_mut(&mut dx.data, sample, |i, dxi| {
            for ch in 0..c {
                let a = gamma[ch] * inv_std[ch];
                let m1 = s1[ch] / cnt;
                let m2 = s2[ch] / cnt;
                let d = &dyd[i * sample + ch * l..i * sample + (ch + 1) * l];
                let h = &xhd[i * sample + ch * l..i * sample + (ch + 1) * l];
                for ((o, &g), &xh) in dxi[ch * l..(ch + 1) * l].iter_mut().zip(d).zip(h) {
                    *o = a * (g - m1 - xh * m2);
                }
            }
        });
        dx
    }
}
