//! Set encoders over one curve's (position, amplitude) peak pairs.
//!
//! Both variants embed each peak with a small shared MLP. The simple
//! encoder sums the embeddings; the softmax encoder computes per-peak
//! logits from the *position only*, applies a per-head softmax across the
//! curve's peaks, and concatenates the weighted sums. Either aggregate is
//! passed through a second small MLP. An empty peak list yields the
//! second MLP applied to the zero vector.

use rand::Rng;

use super::{LinearG, PeakEncoderKind};
use crate::nn::{relu, relu_backward, Mat};

#[derive(Debug, Clone)]
pub struct PeakEncoder {
    pub kind: PeakEncoderKind,
    pub heads: usize,
    pub dim: usize,
    pub embed1: LinearG,
    pub embed2: LinearG,
    pub logit1: Option<LinearG>,
    pub logit2: Option<LinearG>,
    pub out1: LinearG,
    pub out2: LinearG,
}

pub struct EncCache {
    feat: Mat,
    a1: Mat,
    e2: Mat,
    la: Option<Mat>,
    wts: Option<Mat>,
    ranges: Vec<(usize, usize)>,
    pub(crate) agg: Mat,
    oa: Mat,
}

fn pos_column(feat: &Mat) -> Mat {
    let mut pos = Mat::zeros(feat.rows, 1);
    for p in 0..feat.rows {
        pos.row_mut(p)[0] = feat.row(p)[0];
    }
    pos
}

impl PeakEncoder {
    pub fn new<R: Rng>(kind: PeakEncoderKind, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_ne!(kind, PeakEncoderKind::None);
        assert!(dim >= 1 && heads >= 1);
        let embed1 = LinearG::new(2, dim, rng);
        let embed2 = LinearG::new(dim, dim, rng);
        let (logit1, logit2) = if kind == PeakEncoderKind::Softmax {
            (Some(LinearG::new(1, dim, rng)), Some(LinearG::new(dim, heads, rng)))
        } else {
            (None, None)
        };
        let aggw = if kind == PeakEncoderKind::Softmax { heads * dim } else { dim };
        let out1 = LinearG::new(aggw, dim, rng);
        let out2 = LinearG::new(dim, dim, rng);
        PeakEncoder { kind, heads, dim, embed1, embed2, logit1, logit2, out1, out2 }
    }

    /// Output features per curve.
    pub fn out_width(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, peaks: &[&[(f64, f64)]]) -> Mat {
        self.run(peaks).0
    }

    pub fn run(&self, peaks: &[&[(f64, f64)]]) -> (Mat, EncCache) {
        let n = peaks.len();
        let total: usize = peaks.iter().map(|p| p.len()).sum();
        let mut feat = Mat::zeros(total, 2);
        let mut ranges = Vec::with_capacity(n);
        let mut row = 0;
        for ps in peaks {
            let start = row;
            // Canonical per-curve order makes the aggregation sums
            // bit-identical under any permutation of the input list.
            let mut sorted: Vec<(f64, f64)> = ps.to_vec();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            for (x, a) in sorted {
                feat.row_mut(row)[0] = x;
                feat.row_mut(row)[1] = a;
                row += 1;
            }
            ranges.push((start, row));
        }

        let mut a1 = self.embed1.forward(&feat);
        relu(&mut a1.data);
        let e2 = self.embed2.forward(&a1);

        let aggw = self.out1.lin.n_in;
        let mut agg = Mat::zeros(n, aggw);
        let (mut la, mut wts) = (None, None);
        match self.kind {
            PeakEncoderKind::Simple => {
                for (i, &(s, e)) in ranges.iter().enumerate() {
                    let out = agg.row_mut(i);
                    for p in s..e {
                        for (o, v) in out.iter_mut().zip(e2.row(p)) {
                            *o += v;
                        }
                    }
                }
            }
            PeakEncoderKind::Softmax => {
                let mut l = self.logit1.as_ref().unwrap().forward(&pos_column(&feat));
                relu(&mut l.data);
                let logits = self.logit2.as_ref().unwrap().forward(&l);
                let mut w = Mat::zeros(total, self.heads);
                for &(s, e) in &ranges {
                    for h in 0..self.heads {
                        if s == e {
                            continue;
                        }
                        let mx = (s..e).map(|p| logits.row(p)[h]).fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for p in s..e {
                            let v = (logits.row(p)[h] - mx).exp();
                            w.row_mut(p)[h] = v;
                            z += v;
                        }
                        for p in s..e {
                            w.row_mut(p)[h] /= z;
                        }
                    }
                }
                for (i, &(s, e)) in ranges.iter().enumerate() {
                    for p in s..e {
                        for h in 0..self.heads {
                            let wv = w.row(p)[h];
                            let out = &mut agg.row_mut(i)[h * self.dim..(h + 1) * self.dim];
                            for (o, v) in out.iter_mut().zip(e2.row(p)) {
                                *o += wv * v;
                            }
                        }
                    }
                }
                la = Some(l);
                wts = Some(w);
            }
            PeakEncoderKind::None => unreachable!(),
        }

        let mut oa = self.out1.forward(&agg);
        relu(&mut oa.data);
        let out = self.out2.forward(&oa);
        (out, EncCache { feat, a1, e2, la, wts, ranges, agg, oa })
    }

    /// Accumulates parameter gradients. Input coordinates receive none.
    pub fn backward(&mut self, cache: &EncCache, dout: &Mat) {
        let mut d_oa = self.out2.backward(&cache.oa, dout);
        relu_backward(&cache.oa.data, &mut d_oa.data);
        let dagg = self.out1.backward(&cache.agg, &d_oa);

        let total = cache.e2.rows;
        let mut de2 = Mat::zeros(total, self.dim);
        match self.kind {
            PeakEncoderKind::Simple => {
                for (i, &(s, e)) in cache.ranges.iter().enumerate() {
                    for p in s..e {
                        de2.row_mut(p).copy_from_slice(&dagg.row(i)[..self.dim]);
                    }
                }
            }
            PeakEncoderKind::Softmax => {
                let wts = cache.wts.as_ref().unwrap();
                let mut dlogits = Mat::zeros(total, self.heads);
                for (i, &(s, e)) in cache.ranges.iter().enumerate() {
                    for h in 0..self.heads {
                        let db = &dagg.row(i)[h * self.dim..(h + 1) * self.dim];
                        // dot(db, e2[p]) per peak, then the softmax Jacobian.
                        let mut sbar = 0.0;
                        for p in s..e {
                            let dot: f64 =
                                db.iter().zip(cache.e2.row(p)).map(|(a, b)| a * b).sum();
                            sbar += wts.row(p)[h] * dot;
                        }
                        for p in s..e {
                            let wv = wts.row(p)[h];
                            let dot: f64 =
                                db.iter().zip(cache.e2.row(p)).map(|(a, b)| a * b).sum();
                            for (o, v) in de2.row_mut(p).iter_mut().zip(db) {
                                *o += wv * v;
                            }
                            dlogits.row_mut(p)[h] = wv * (dot - sbar);
                        }
                    }
                }
                let la = cache.la.as_ref().unwrap();
                let mut dla = self.logit2.as_mut().unwrap().backward(la, &dlogits);
                relu_backward(&la.data, &mut dla.data);
                let _ = self.logit1.as_mut().unwrap().backward(&pos_column(&cache.feat), &dla);
            }
            PeakEncoderKind::None => unreachable!(),
        }

        let mut da1 = self.embed2.backward(&cache.a1, &de2);
        relu_backward(&cache.a1.data, &mut da1.data);
        let _ = self.embed1.backward(&cache.feat, &da1);
    }

    pub(crate) fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        let mut v = self.embed1.pairs();
        v.extend(self.embed2.pairs());
        if let Some(l) = &mut self.logit1 {
            v.extend(l.pairs());
        }
        if let Some(l) = &mut self.logit2 {
            v.extend(l.pairs());
        }
        v.extend(self.out1.pairs());
        v.extend(self.out2.pairs());
        v
    }

    pub(crate) fn state(&mut self) -> Vec<&mut Vec<f64>> {
        self.pairs().into_iter().map(|(p, _)| p).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_peaks(n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(-1.0..0.0))).collect()
    }

    #[test]
    fn sum_encoder_is_exactly_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let enc = PeakEncoder::new(PeakEncoderKind::Simple, 5, 1, &mut rng);
        let peaks = rand_peaks(6, &mut rng);
        let mut rev = peaks.clone();
        rev.reverse();
        let a = enc.forward(&[&peaks]);
        let b = enc.forward(&[&rev]);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn softmax_encoder_is_permutation_invariant_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let enc = PeakEncoder::new(PeakEncoderKind::Softmax, 4, 3, &mut rng);
        let peaks = rand_peaks(7, &mut rng);
        let mut rev = peaks.clone();
        rev.reverse();
        let a = enc.forward(&[&peaks]);
        let b = enc.forward(&[&rev]);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn duplicated_peak_doubles_the_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let enc = PeakEncoder::new(PeakEncoderKind::Simple, 5, 1, &mut rng);
        let p = (0.3, -0.6);
        let (_, c1) = enc.run(&[&[p][..]]);
        let (_, c2) = enc.run(&[&[p, p][..]]);
        for (&a, &b) in c2.agg.data.iter().zip(&c1.agg.data) {
            assert_relative_eq!(a, 2.0 * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_list_applies_the_output_net_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for kind in [PeakEncoderKind::Simple, PeakEncoderKind::Softmax] {
            let enc = PeakEncoder::new(kind, 4, 2, &mut rng);
            let got = enc.forward(&[&[][..]]);
            let zero = Mat::zeros(1, enc.out1.lin.n_in);
            let mut oa = enc.out1.forward(&zero);
            relu(&mut oa.data);
            let want = enc.out2.forward(&oa);
            assert_eq!(got.data, want.data);
        }
    }

    #[test]
    fn softmax_weights_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let enc = PeakEncoder::new(PeakEncoderKind::Softmax, 4, 3, &mut rng);
        let peaks = rand_peaks(5, &mut rng);
        let (_, cache) = enc.run(&[&peaks]);
        let wts = cache.wts.unwrap();
        for h in 0..3 {
            let s: f64 = (0..5).map(|p| wts.row(p)[h]).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shifting_all_logits_of_a_head_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut enc = PeakEncoder::new(PeakEncoderKind::Softmax, 4, 2, &mut rng);
        let peaks = rand_peaks(6, &mut rng);
        let before = enc.forward(&[&peaks]);
        // A bias shift on the logit head adds the same constant to every
        // peak's logit for that head.
        for b in enc.logit2.as_mut().unwrap().lin.b.iter_mut() {
            *b += 7.5;
        }
        let after = enc.forward(&[&peaks]);
        for (x, y) in before.data.iter().zip(&after.data) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_peak_softmax_reduces_to_its_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let enc = PeakEncoder::new(PeakEncoderKind::Softmax, 4, 2, &mut rng);
        let (_, cache) = enc.run(&[&[(0.4, -0.8)][..]]);
        // One peak: every head's weight is 1, so the aggregate is the
        // value embedding repeated per head.
        for h in 0..2 {
            assert_eq!(&cache.agg.row(0)[h * 4..(h + 1) * 4], cache.e2.row(0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for kind in [PeakEncoderKind::Simple, PeakEncoderKind::Softmax] {
            let mut enc = PeakEncoder::new(kind, 3, 2, &mut rng);
            let p1 = rand_peaks(4, &mut rng);
            let p2 = rand_peaks(0, &mut rng);
            let p3 = rand_peaks(2, &mut rng);
            let batch: Vec<&[(f64, f64)]> = vec![&p1, &p2, &p3];
            let r: Vec<f64> = (0..3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (out, cache) = enc.run(&batch);
            let mut dout = out.clone();
            dout.data.copy_from_slice(&r);
            enc.backward(&cache, &dout);

            let eps = 1e-6;
            let n_bufs = enc.pairs().len();
            for vi in 0..n_bufs {
                for pi in 0..enc.pairs()[vi].0.len() {
                    let (orig, g) = {
                        let pairs = enc.pairs();
                        (pairs[vi].0[pi], pairs[vi].1[pi])
                    };
                    enc.pairs()[vi].0[pi] = orig + eps;
                    let lp: f64 =
                        enc.forward(&batch).data.iter().zip(&r).map(|(a, b)| a * b).sum();
                    enc.pairs()[vi].0[pi] = orig - eps;
                    let lm: f64 =
                        enc.forward(&batch).data.iter().zip(&r).map(|(a, b)| a * b).sum();
                    enc.pairs()[vi].0[pi] = orig;
                    let fd = (lp - lm) / (2.0 * eps);
                    assert!(
                        (g - fd).abs() <= 1e-6 + 1e-5 * fd.abs().max(g.abs()),
                        "{kind:?} param ({vi},{pi}): {g} vs {fd}"
                    );
                }
            }
        }
    }
}
