//! 1d-ResNet backbone: bottleneck blocks, four layers, global max pool.
//!
//! Layer schedule for `nchan` channels after the stem (input -> bottleneck
//! channels; a block outputs 4x its bottleneck width):
//!
//! ```text
//! Conv(1 -> nchan, k=7, s=2), BN, ReLU, MaxPool(k=3, s=2)
//! Layer1( nchan    -> nchan,   stride = first_layer_stride )
//! Layer2( nchan*4  -> nchan*2, stride = 2 )
//! Layer3( nchan*8  -> nchan*4, stride = 2 )
//! Layer4( nchan*16 -> nchan*8, stride = 2, max-pool variant )
//! ```
//!
//! In the layer-4 variant each block's 3-wide strided convolution is
//! replaced by MaxPool(k=3, stride, pad=1) followed by a 1-wide
//! convolution. The final feature map is max-pooled to length 1, giving
//! `nchan * 32` features.

use rand::Rng;

use crate::nn::{
    global_max_pool, global_max_unpool, relu, relu_backward, BatchNorm1d, BnCache, Conv1d, Mat,
    MaxPool1d, Tensor3,
};

/// Convolution + batch norm with owned gradient buffers.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    gw: Vec<f64>,
    ggamma: Vec<f64>,
    gbeta: Vec<f64>,
}

impl ConvBn {
    fn new<R: Rng>(cout: usize, cin: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let conv = Conv1d::new(cout, cin, k, stride, pad, rng);
        let gw = vec![0.0; conv.w.len()];
        ConvBn { conv, bn: BatchNorm1d::new(cout), gw, ggamma: vec![0.0; cout], gbeta: vec![0.0; cout] }
    }

    fn forward_eval(&self, x: &Tensor3) -> Tensor3 {
        self.bn.forward_eval(&self.conv.forward(x))
    }

    fn forward_train(&mut self, x: &Tensor3) -> (Tensor3, BnCache) {
        self.bn.forward_train(&self.conv.forward(x))
    }

    /// Accumulates gradients, returns the input gradient.
    fn backward(&mut self, x: &Tensor3, bnc: &BnCache, dy: &Tensor3) -> Tensor3 {
        let dconv = self.bn.backward(bnc, dy, &mut self.ggamma, &mut self.gbeta);
        self.conv.backward(x, &dconv, &mut self.gw)
    }

    fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        vec![
            (&mut self.conv.w, &mut self.gw),
            (&mut self.bn.gamma, &mut self.ggamma),
            (&mut self.bn.beta, &mut self.gbeta),
        ]
    }

    fn state(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.conv.w,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
        ]
    }
}

/// The middle stage of a bottleneck block.
#[derive(Debug, Clone)]
enum Mid {
    /// Standard: 3-wide convolution carrying the block's stride.
    Conv(ConvBn),
    /// Max-pool variant: pooling carries the stride, then a 1-wide conv.
    Pool { pool: MaxPool1d, conv: ConvBn },
}

/// ResNet bottleneck block: 1-wide conv in->b, middle stage b->b (stride),
/// 1-wide conv b->4b, plus a skip (1-wide downsample conv when shapes
/// change); BN after every conv, ReLU between stages and after the add.
#[derive(Debug, Clone)]
pub(crate) struct Bottleneck {
    conv1: ConvBn,
    mid: Mid,
    conv3: ConvBn,
    down: Option<ConvBn>,
}

pub(crate) struct BlockCache {
    x: Tensor3,
    bn1: BnCache,
    y1: Tensor3,
    /// Pool-variant extras: pooled tensor and its argmax.
    mid_in: Option<(Tensor3, Vec<u32>)>,
    bn2: BnCache,
    y2: Tensor3,
    bn3: BnCache,
    bnd: Option<BnCache>,
    out: Tensor3,
}

impl Bottleneck {
    fn new<R: Rng>(in_ch: usize, b: usize, stride: usize, maxpool: bool, rng: &mut R) -> Self {
        let conv1 = ConvBn::new(b, in_ch, 1, 1, 0, rng);
        let mid = if maxpool {
            Mid::Pool {
                pool: MaxPool1d::new(3, stride, 1),
                conv: ConvBn::new(b, b, 1, 1, 0, rng),
            }
        } else {
            Mid::Conv(ConvBn::new(b, b, 3, stride, 1, rng))
        };
        let conv3 = ConvBn::new(4 * b, b, 1, 1, 0, rng);
        let down = if stride != 1 || in_ch != 4 * b {
            Some(ConvBn::new(4 * b, in_ch, 1, stride, 0, rng))
        } else {
            None
        };
        Bottleneck { conv1, mid, conv3, down }
    }

    fn forward_eval(&self, x: &Tensor3) -> Tensor3 {
        let mut y1 = self.conv1.forward_eval(x);
        relu(&mut y1.data);
        let mut y2 = match &self.mid {
            Mid::Conv(c) => c.forward_eval(&y1),
            Mid::Pool { pool, conv } => conv.forward_eval(&pool.forward(&y1).0),
        };
        relu(&mut y2.data);
        let mut out = self.conv3.forward_eval(&y2);
        match &self.down {
            Some(d) => {
                let skip = d.forward_eval(x);
                for (a, b) in out.data.iter_mut().zip(&skip.data) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in out.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
            }
        }
        relu(&mut out.data);
        out
    }

    fn forward_train(&mut self, x: Tensor3) -> (Tensor3, BlockCache) {
        let (mut y1, bn1) = self.conv1.forward_train(&x);
        relu(&mut y1.data);
        let (mid_in, y2bn) = match &mut self.mid {
            Mid::Conv(c) => (None, c.forward_train(&y1)),
            Mid::Pool { pool, conv } => {
                let (pooled, arg) = pool.forward(&y1);
                let fwd = conv.forward_train(&pooled);
                (Some((pooled, arg)), fwd)
            }
        };
        let (mut y2, bn2) = y2bn;
        relu(&mut y2.data);
        let (mut out, bn3) = self.conv3.forward_train(&y2);
        let bnd = match &mut self.down {
            Some(d) => {
                let (skip, bnd) = d.forward_train(&x);
                for (a, b) in out.data.iter_mut().zip(&skip.data) {
                    *a += b;
                }
                Some(bnd)
            }
            None => {
                for (a, b) in out.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
                None
            }
        };
        relu(&mut out.data);
        let cache = BlockCache { x, bn1, y1, mid_in, bn2, y2, bn3, bnd, out: out.clone() };
        (out, cache)
    }

    fn backward(&mut self, cache: &BlockCache, mut dy: Tensor3) -> Tensor3 {
        relu_backward(&cache.out.data, &mut dy.data);
        let mut d_y2 = self.conv3.backward(&cache.y2, &cache.bn3, &dy);
        relu_backward(&cache.y2.data, &mut d_y2.data);
        let mut d_y1 = match &mut self.mid {
            Mid::Conv(c) => c.backward(&cache.y1, &cache.bn2, &d_y2),
            Mid::Pool { pool, conv } => {
                let (pooled, arg) = cache.mid_in.as_ref().expect("pool cache");
                let dp = conv.backward(pooled, &cache.bn2, &d_y2);
                pool.backward(cache.y1.l, &dp, arg)
            }
        };
        relu_backward(&cache.y1.data, &mut d_y1.data);
        let mut dx = self.conv1.backward(&cache.x, &cache.bn1, &d_y1);
        match &mut self.down {
            Some(d) => {
                let dd = d.backward(&cache.x, cache.bnd.as_ref().expect("down cache"), &dy);
                for (a, b) in dx.data.iter_mut().zip(&dd.data) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in dx.data.iter_mut().zip(&dy.data) {
                    *a += b;
                }
            }
        }
        dx
    }

    fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        let mut v = self.conv1.pairs();
        match &mut self.mid {
            Mid::Conv(c) => v.extend(c.pairs()),
            Mid::Pool { conv, .. } => v.extend(conv.pairs()),
        }
        v.extend(self.conv3.pairs());
        if let Some(d) = &mut self.down {
            v.extend(d.pairs());
        }
        v
    }

    fn state(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.conv1.state();
        match &mut self.mid {
            Mid::Conv(c) => v.extend(c.state()),
            Mid::Pool { conv, .. } => v.extend(conv.state()),
        }
        v.extend(self.conv3.state());
        if let Some(d) = &mut self.down {
            v.extend(d.state());
        }
        v
    }
}

#[derive(Debug, Clone)]
struct Layer {
    blocks: Vec<Bottleneck>,
}

impl Layer {
    fn new<R: Rng>(
        in_ch: usize,
        b: usize,
        n_blocks: usize,
        stride: usize,
        maxpool: bool,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::with_capacity(n_blocks);
        blocks.push(Bottleneck::new(in_ch, b, stride, maxpool, rng));
        for _ in 1..n_blocks {
            blocks.push(Bottleneck::new(4 * b, b, 1, maxpool, rng));
        }
        Layer { blocks }
    }

    fn forward_eval(&self, x: &Tensor3) -> Tensor3 {
        let mut cur = self.blocks[0].forward_eval(x);
        for b in &self.blocks[1..] {
            cur = b.forward_eval(&cur);
        }
        cur
    }

    fn forward_train(&mut self, x: Tensor3) -> (Tensor3, Vec<BlockCache>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for b in &mut self.blocks {
            let (out, c) = b.forward_train(cur);
            caches.push(c);
            cur = out;
        }
        (cur, caches)
    }

    fn backward(&mut self, caches: &[BlockCache], mut dy: Tensor3) -> Tensor3 {
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            dy = b.backward(c, dy);
        }
        dy
    }
}

/// The shared per-curve feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBn,
    pool: MaxPool1d,
    layers: Vec<Layer>,
    /// Features per curve after global pooling: `nchan * 32`.
    pub out_width: usize,
}

pub struct BackboneCache {
    x0: Tensor3,
    bn0: BnCache,
    stem_out: Tensor3,
    pool_arg: Vec<u32>,
    layer_caches: Vec<Vec<BlockCache>>,
    feat_l: usize,
    gp_arg: Vec<u32>,
}

impl Backbone {
    pub fn new<R: Rng>(nchan: usize, blocks: [usize; 4], first_layer_stride: usize, rng: &mut R) -> Self {
        let stem = ConvBn::new(nchan, 1, 7, 2, 3, rng);
        let layers = vec![
            Layer::new(nchan, nchan, blocks[0], first_layer_stride, false, rng),
            Layer::new(nchan * 4, nchan * 2, blocks[1], 2, false, rng),
            Layer::new(nchan * 8, nchan * 4, blocks[2], 2, false, rng),
            Layer::new(nchan * 16, nchan * 8, blocks[3], 2, true, rng),
        ];
        Backbone { stem, pool: MaxPool1d::new(3, 2, 1), layers, out_width: nchan * 32 }
    }

    /// Inference pass: (rows, 1, L) curves -> (rows, out_width) features.
    pub fn forward_eval(&self, x: &Tensor3) -> Mat {
        assert_eq!(x.c, 1);
        let mut s = self.stem.forward_eval(x);
        relu(&mut s.data);
        let mut cur = self.pool.forward(&s).0;
        for l in &self.layers {
            cur = l.forward_eval(&cur);
        }
        global_max_pool(&cur).0
    }

    pub fn forward_train(&mut self, x: Tensor3) -> (Mat, BackboneCache) {
        assert_eq!(x.c, 1);
        let (mut s, bn0) = self.stem.forward_train(&x);
        relu(&mut s.data);
        let (pooled, pool_arg) = self.pool.forward(&s);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut cur = pooled;
        for l in &mut self.layers {
            let (out, c) = l.forward_train(cur);
            layer_caches.push(c);
            cur = out;
        }
        let feat_l = cur.l;
        let (emb, gp_arg) = global_max_pool(&cur);
        (emb, BackboneCache { x0: x, bn0, stem_out: s, pool_arg, layer_caches, feat_l, gp_arg })
    }

    /// Accumulates parameter gradients; the input gradient is discarded.
    pub fn backward(&mut self, cache: &BackboneCache, d_emb: &Mat) {
        let mut d = global_max_unpool(d_emb, &cache.gp_arg, cache.feat_l);
        for (l, c) in self.layers.iter_mut().zip(&cache.layer_caches).rev() {
            d = l.backward(c, d);
        }
        let mut d = self.pool.backward(cache.stem_out.l, &d, &cache.pool_arg);
        relu_backward(&cache.stem_out.data, &mut d.data);
        let _ = self.stem.backward(&cache.x0, &cache.bn0, &d);
    }

    pub(crate) fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        let mut v = self.stem.pairs();
        for l in &mut self.layers {
            for b in &mut l.blocks {
                v.extend(b.pairs());
            }
        }
        v
    }

    pub(crate) fn state(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.stem.state();
        for l in &mut self.layers {
            for b in &mut l.blocks {
                v.extend(b.state());
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        let mut t = Tensor3::zeros(n, 1, l);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..0.0);
        }
        t
    }

    /// Length schedule oracle: replay the conv/pool arithmetic.
    fn trace_len(mut l: usize, first_layer_stride: usize) -> usize {
        let conv = |l: usize, k: usize, s: usize, p: usize| (l + 2 * p - k) / s + 1;
        l = conv(l, 7, 2, 3); // stem
        l = conv(l, 3, 2, 1); // stem pool
        for s in [first_layer_stride, 2, 2, 2] {
            l = conv(l, 3, s, 1); // the strided middle stage of block 1
        }
        l
    }

    #[test]
    fn full_configuration_reaches_the_documented_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let bb = Backbone::new(64, [3, 4, 6, 3], 1, &mut rng);
        assert_eq!(bb.out_width, 2048);
        let x = rand_tensor(1, 1300, &mut rng);
        let emb = bb.forward_eval(&x);
        assert_eq!((emb.rows, emb.cols), (1, 2048));
        assert!(emb.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn desk_configuration_forwards_a_full_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let bb = Backbone::new(16, [1, 1, 1, 1], 2, &mut rng);
        assert_eq!(bb.out_width, 512);
        let x = rand_tensor(2, 1300, &mut rng);
        let emb = bb.forward_eval(&x);
        assert_eq!((emb.rows, emb.cols), (2, 512));
        assert_eq!(trace_len(1300, 2), 21);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let mut b1 = Backbone::new(4, [1, 1, 1, 1], 1, &mut r1);
        let mut b2 = Backbone::new(4, [1, 1, 1, 1], 1, &mut r2);
        for ((p1, _), (p2, _)) in b1.pairs().into_iter().zip(b2.pairs()) {
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn train_and_eval_agree_on_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut bb = Backbone::new(2, [1, 1, 1, 1], 1, &mut rng);
        let x = rand_tensor(3, 64, &mut rng);
        let (emb, _) = bb.forward_train(x.clone());
        assert_eq!((emb.rows, emb.cols), (3, 64));
        let emb2 = bb.forward_eval(&x);
        assert_eq!((emb2.rows, emb2.cols), (3, 64));
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let bb = Backbone::new(2, [1, 1, 1, 1], 2, &mut rng);
        // Input long enough that every layer keeps a few positions; with a
        // length-1 trace the batch statistics cover two values and the loss
        // curvature dwarfs a central-difference estimate.
        let x = rand_tensor(3, 160, &mut rng);
        let w = bb.out_width;
        let r: Vec<f64> = (0..3 * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |bb: &Backbone, x: &Tensor3, r: &[f64]| -> f64 {
            let mut b = bb.clone();
            let (emb, _) = b.forward_train(x.clone());
            emb.data.iter().zip(r).map(|(a, b)| a * b).sum()
        };

        let (emb, cache) = bb.clone().forward_train(x.clone());
        let mut d = Mat::zeros(3, w);
        d.data.copy_from_slice(&r);
        // Gradients must come from the same parameter values the cache
        // was built with; clone for the cache, accumulate on `bb`.
        let mut bb_grad = bb.clone();
        bb_grad.backward(&cache, &d);
        assert_eq!(emb.rows, 3);

        // Sample a few parameters from every structural element: stem,
        // block convs, BN affine terms, downsample, pool-variant conv.
        let mut picks = Vec::new();
        {
            let pairs = bb_grad.pairs();
            let mut step = 7;
            for (vi, (p, _)) in pairs.iter().enumerate() {
                if p.is_empty() {
                    continue;
                }
                picks.push((vi, step % p.len()));
                step = step.wrapping_mul(31).wrapping_add(11);
            }
        }
        let eps = 1e-5;
        for (vi, pi) in picks {
            let g = {
                let pairs = bb_grad.pairs();
                pairs[vi].1[pi]
            };
            let orig = {
                let pairs = bb_grad.pairs();
                pairs[vi].0[pi]
            };
            {
                let mut pairs = bb_grad.pairs();
                pairs[vi].0[pi] = orig + eps;
            }
            let lp = loss(&bb_grad, &x, &r);
            {
                let mut pairs = bb_grad.pairs();
                pairs[vi].0[pi] = orig - eps;
            }
            let lm = loss(&bb_grad, &x, &r);
            {
                let mut pairs = bb_grad.pairs();
                pairs[vi].0[pi] = orig;
            }
            let fd = (lp - lm) / (2.0 * eps);
            let tol = 1e-6 + 1e-4 * fd.abs().max(g.abs());
            assert!((g - fd).abs() <= tol, "param ({vi},{pi}): grad {g} vs fd {fd}");
        }
    }
}
