//! The actor network.
//!
//! A shared 1d-ResNet backbone encodes each of the three S-curves; peak
//! encoders summarise each curve's reflection dips; the S21 regression
//! coefficients are appended when enabled. A feed-forward head maps the
//! concatenated features to one raw value per screw, and the forces
//! vector gates that output: `action = (W_f' * forces) .* raw`, so a
//! tuned device (all forces zero) always yields the exact zero action.

mod backbone;
mod peaks;

pub use backbone::Backbone;
pub use peaks::{EncCache, PeakEncoder};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::ActorInput;
use crate::nn::{relu, relu_backward, Linear, Mat, Tensor3};

/// Size of the forces vector (10 subareas per passband).
pub const N_FORCES: usize = 2 * crate::metrics::SUBRANGES_PER_BAND;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakEncoderKind {
    None,
    Simple,
    Softmax,
}

/// Everything that determines the actor's parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    /// Channels after the first convolution.
    pub nchan: usize,
    /// Blocks per ResNet layer.
    pub blocks: [usize; 4],
    /// Stride of the first layer's first block (1 or 2).
    pub first_layer_stride: usize,
    /// Encoder per curve, in S11/S21/S31 order.
    pub peak_encoders: [PeakEncoderKind; 3],
    /// Softmax-mask heads (softmax encoders only).
    pub softmax_heads: usize,
    /// Append the 8 S21 regression coefficients to the head input.
    pub use_s21_regression: bool,
    /// Hidden widths of the head MLP.
    pub head_hidden: Vec<usize>,
    /// Peak-embedding width.
    pub peak_embed_dim: usize,
    pub n_screws: usize,
    pub n_points: usize,
}

impl ActorConfig {
    /// Production-scale defaults.
    pub fn full(n_screws: usize, n_points: usize) -> Self {
        ActorConfig {
            nchan: 64,
            blocks: [3, 4, 6, 3],
            first_layer_stride: 1,
            peak_encoders: [
                PeakEncoderKind::Softmax,
                PeakEncoderKind::Simple,
                PeakEncoderKind::Simple,
            ],
            softmax_heads: 4,
            use_s21_regression: true,
            head_hidden: vec![512, 256],
            peak_embed_dim: 32,
            n_screws,
            n_points,
        }
    }

    /// Small configuration that trains in minutes on a single core.
    pub fn desk(n_screws: usize, n_points: usize) -> Self {
        ActorConfig {
            nchan: 16,
            blocks: [1, 1, 1, 1],
            first_layer_stride: 2,
            peak_encoders: [
                PeakEncoderKind::Softmax,
                PeakEncoderKind::Simple,
                PeakEncoderKind::Simple,
            ],
            softmax_heads: 4,
            use_s21_regression: true,
            head_hidden: vec![512, 256],
            peak_embed_dim: 32,
            n_screws,
            n_points,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.nchan < 1 {
            return Err("nchan must be >= 1".into());
        }
        if self.blocks.iter().any(|&b| b < 1) {
            return Err("every layer needs at least one block".into());
        }
        if !(self.first_layer_stride == 1 || self.first_layer_stride == 2) {
            return Err("first_layer_stride must be 1 or 2".into());
        }
        if self.softmax_heads < 1 {
            return Err("softmax_heads must be >= 1".into());
        }
        if self.peak_embed_dim < 1 {
            return Err("peak_embed_dim must be >= 1".into());
        }
        if self.n_screws < 1 {
            return Err("n_screws must be >= 1".into());
        }
        // The backbone divides the curve length by up to 2^6; make sure
        // every stage keeps at least one sample.
        let mut l = self.n_points;
        let conv = |l: usize, k: usize, s: usize, p: usize| (l + 2 * p).saturating_sub(k) / s + 1;
        l = conv(l, 7, 2, 3);
        l = conv(l, 3, 2, 1);
        for s in [self.first_layer_stride, 2, 2, 2] {
            l = conv(l, 3, s, 1);
        }
        if self.n_points < 7 || l < 1 {
            return Err(format!("n_points {} is too short for the backbone", self.n_points));
        }
        Ok(())
    }
}

/// Linear layer bundled with its gradient buffers.
#[derive(Debug, Clone)]
pub struct LinearG {
    pub lin: Linear,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
}

impl LinearG {
    pub fn new<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let lin = Linear::new(n_in, n_out, rng);
        let gw = vec![0.0; lin.w.len()];
        let gb = vec![0.0; lin.b.len()];
        LinearG { lin, gw, gb }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        self.lin.forward(x)
    }

    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.lin.backward(x, dy, &mut self.gw, &mut self.gb)
    }

    fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        vec![(&mut self.lin.w, &mut self.gw), (&mut self.lin.b, &mut self.gb)]
    }
}

/// Plain MLP: ReLU between layers, linear output.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<LinearG>,
}

struct MlpCache {
    /// Input of each layer (element 0 is the MLP input).
    xs: Vec<Mat>,
}

impl Mlp {
    fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2);
        let layers = sizes.windows(2).map(|w| LinearG::new(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    fn forward(&self, x: &Mat) -> Mat {
        let mut cur = self.layers[0].forward(x);
        for l in &self.layers[1..] {
            relu(&mut cur.data);
            cur = l.forward(&cur);
        }
        cur
    }

    fn forward_cached(&self, x: Mat) -> (Mat, MlpCache) {
        let mut xs = vec![x];
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.forward(xs.last().unwrap());
            if i + 1 < self.layers.len() {
                relu(&mut y.data);
            }
            xs.push(y);
        }
        let out = xs.pop().unwrap();
        (out, MlpCache { xs })
    }

    fn backward(&mut self, cache: &MlpCache, mut dy: Mat) -> Mat {
        for i in (0..self.layers.len()).rev() {
            dy = self.layers[i].backward(&cache.xs[i], &dy);
            if i > 0 {
                relu_backward(&cache.xs[i].data, &mut dy.data);
            }
        }
        dy
    }

    fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        self.layers.iter_mut().flat_map(|l| l.pairs()).collect()
    }
}

/// The full trainable policy.
#[derive(Debug, Clone)]
pub struct Actor {
    pub config: ActorConfig,
    backbone: Backbone,
    encoders: [Option<PeakEncoder>; 3],
    head: Mlp,
    /// Force gate, row-major (N_FORCES x n_screws).
    pub w_f: Vec<f64>,
    g_wf: Vec<f64>,
}

/// Intermediate values of one training forward pass.
pub struct ActorCache {
    bb: backbone::BackboneCache,
    enc: [Option<EncCache>; 3],
    head: MlpCache,
    raw: Mat,
    gate: Mat,
    forces: Mat,
}

impl Actor {
    pub fn new(config: &ActorConfig, seed: u64) -> Self {
        config.validate().expect("invalid actor config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone =
            Backbone::new(config.nchan, config.blocks, config.first_layer_stride, &mut rng);
        let mut encoders = [None, None, None];
        for (slot, &kind) in encoders.iter_mut().zip(&config.peak_encoders) {
            if kind != PeakEncoderKind::None {
                *slot = Some(PeakEncoder::new(
                    kind,
                    config.peak_embed_dim,
                    config.softmax_heads,
                    &mut rng,
                ));
            }
        }
        let mut sizes = vec![Self::feat_width_of(config, backbone.out_width)];
        sizes.extend_from_slice(&config.head_hidden);
        sizes.push(config.n_screws);
        let head = Mlp::new(&sizes, &mut rng);
        let mut w_f = vec![0.0; N_FORCES * config.n_screws];
        for v in w_f.iter_mut() {
            *v = rng.gen_range(-0.01..=0.01);
        }
        let g_wf = vec![0.0; w_f.len()];
        Actor { config: config.clone(), backbone, encoders, head, w_f, g_wf }
    }

    fn feat_width_of(config: &ActorConfig, out_width: usize) -> usize {
        let mut w = 3 * out_width;
        for kind in &config.peak_encoders {
            if *kind != PeakEncoderKind::None {
                w += config.peak_embed_dim;
            }
        }
        if config.use_s21_regression {
            w += 8;
        }
        w
    }

    pub fn n_params(&mut self) -> usize {
        self.pairs().iter().map(|(p, _)| p.len()).sum()
    }

    fn curves_tensor(&self, inputs: &[ActorInput]) -> Tensor3 {
        let l = self.config.n_points;
        let mut t = Tensor3::zeros(3 * inputs.len(), 1, l);
        for (i, inp) in inputs.iter().enumerate() {
            for (c, curve) in inp.curves.iter().enumerate() {
                assert_eq!(curve.len(), l, "curve length does not match the actor config");
                t.row_mut(3 * i + c, 0).copy_from_slice(curve);
            }
        }
        t
    }

    fn forces_mat(inputs: &[ActorInput]) -> Mat {
        let mut m = Mat::zeros(inputs.len(), N_FORCES);
        for (i, inp) in inputs.iter().enumerate() {
            assert_eq!(inp.forces.len(), N_FORCES);
            m.row_mut(i).copy_from_slice(&inp.forces);
        }
        m
    }

    fn peaks_of<'a>(inputs: &'a [ActorInput], c: usize) -> Vec<&'a [(f64, f64)]> {
        inputs.iter().map(|inp| inp.peaks[c].as_slice()).collect()
    }

    /// gate = forces * W_f, one value per screw.
    fn gate(&self, forces: &Mat) -> Mat {
        let (n, s) = (forces.rows, self.config.n_screws);
        let mut g = Mat::zeros(n, s);
        if n > 0 {
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    N_FORCES,
                    s,
                    1.0,
                    forces.data.as_ptr(),
                    N_FORCES as isize,
                    1,
                    self.w_f.as_ptr(),
                    s as isize,
                    1,
                    0.0,
                    g.data.as_mut_ptr(),
                    s as isize,
                    1,
                );
            }
        }
        g
    }

    fn assemble_features(
        &self,
        inputs: &[ActorInput],
        emb: &Mat,
        enc_outs: &[Option<Mat>; 3],
    ) -> Mat {
        let w = self.backbone.out_width;
        let mut feat = Mat::zeros(inputs.len(), Self::feat_width_of(&self.config, w));
        for (i, inp) in inputs.iter().enumerate() {
            let row = feat.row_mut(i);
            for c in 0..3 {
                row[c * w..(c + 1) * w].copy_from_slice(emb.row(3 * i + c));
            }
            let mut col = 3 * w;
            for enc in enc_outs {
                if let Some(e) = enc {
                    row[col..col + e.cols].copy_from_slice(e.row(i));
                    col += e.cols;
                }
            }
            if self.config.use_s21_regression {
                assert_eq!(inp.shape.len(), 8);
                row[col..col + 8].copy_from_slice(&inp.shape);
            }
        }
        feat
    }

    /// Inference pass (running statistics, no caches).
    pub fn forward(&self, inputs: &[ActorInput]) -> Mat {
        let emb = self.backbone.forward_eval(&self.curves_tensor(inputs));
        let mut enc_outs: [Option<Mat>; 3] = [None, None, None];
        for c in 0..3 {
            if let Some(enc) = &self.encoders[c] {
                enc_outs[c] = Some(enc.forward(&Self::peaks_of(inputs, c)));
            }
        }
        let feat = self.assemble_features(inputs, &emb, &enc_outs);
        let mut act = self.head.forward(&feat);
        let gate = self.gate(&Self::forces_mat(inputs));
        for (a, g) in act.data.iter_mut().zip(&gate.data) {
            *a *= g;
        }
        act
    }

    /// Training pass: batch statistics, caches for [`Actor::backward`].
    pub fn forward_train(&mut self, inputs: &[ActorInput]) -> (Mat, ActorCache) {
        let (emb, bb) = self.backbone.forward_train(self.curves_tensor(inputs));
        let mut enc_outs: [Option<Mat>; 3] = [None, None, None];
        let mut enc_caches: [Option<EncCache>; 3] = [None, None, None];
        for c in 0..3 {
            if let Some(enc) = &self.encoders[c] {
                let (out, cache) = enc.run(&Self::peaks_of(inputs, c));
                enc_outs[c] = Some(out);
                enc_caches[c] = Some(cache);
            }
        }
        let feat = self.assemble_features(inputs, &emb, &enc_outs);
        let (raw, head) = self.head.forward_cached(feat);
        let forces = Self::forces_mat(inputs);
        let gate = self.gate(&forces);
        let mut act = raw.clone();
        for (a, g) in act.data.iter_mut().zip(&gate.data) {
            *a *= g;
        }
        (act, ActorCache { bb, enc: enc_caches, head, raw, gate, forces })
    }

    /// Accumulates gradients of a scalar loss with gradient `d_action`.
    pub fn backward(&mut self, cache: &ActorCache, d_action: &Mat) {
        let n = d_action.rows;
        let s = self.config.n_screws;
        assert_eq!(d_action.cols, s);

        // action = gate .* raw
        let mut draw = Mat::zeros(n, s);
        let mut dgate = Mat::zeros(n, s);
        for i in 0..n * s {
            draw.data[i] = d_action.data[i] * cache.gate.data[i];
            dgate.data[i] = d_action.data[i] * cache.raw.data[i];
        }
        // dW_f += forces' * dgate
        if n > 0 {
            unsafe {
                matrixmultiply::dgemm(
                    N_FORCES,
                    n,
                    s,
                    1.0,
                    cache.forces.data.as_ptr(),
                    1,
                    N_FORCES as isize,
                    dgate.data.as_ptr(),
                    s as isize,
                    1,
                    1.0,
                    self.g_wf.as_mut_ptr(),
                    s as isize,
                    1,
                );
            }
        }

        let dfeat = self.head.backward(&cache.head, draw);
        let w = self.backbone.out_width;
        let mut d_emb = Mat::zeros(3 * n, w);
        for i in 0..n {
            for c in 0..3 {
                d_emb.row_mut(3 * i + c).copy_from_slice(&dfeat.row(i)[c * w..(c + 1) * w]);
            }
        }
        let mut col = 3 * w;
        for c in 0..3 {
            if let Some(enc) = &mut self.encoders[c] {
                let dim = enc.out_width();
                let mut de = Mat::zeros(n, dim);
                for i in 0..n {
                    de.row_mut(i).copy_from_slice(&dfeat.row(i)[col..col + dim]);
                }
                enc.backward(cache.enc[c].as_ref().expect("encoder cache"), &de);
                col += dim;
            }
        }
        // Shape coefficients are inputs; their gradient is dropped.
        self.backbone.backward(&cache.bb, &d_emb);
    }

    /// All (parameter, gradient) buffers in canonical order.
    pub fn pairs(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        let mut v = self.backbone.pairs();
        for enc in self.encoders.iter_mut().flatten() {
            v.extend(enc.pairs());
        }
        v.extend(self.head.pairs());
        v.push((&mut self.w_f, &mut self.g_wf));
        v
    }

    pub fn zero_grads(&mut self) {
        for (_, g) in self.pairs() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Component name of each tensor returned by [`Actor::pairs`], in the
    /// same order. Lets callers sample parameters per component.
    pub fn pair_sections(&mut self) -> Vec<&'static str> {
        let n_bb = self.backbone.pairs().len();
        let n_enc: usize =
            self.encoders.iter_mut().flatten().map(|e| e.pairs().len()).sum();
        let n_head = self.head.pairs().len();
        let mut v = Vec::with_capacity(n_bb + n_enc + n_head + 1);
        v.extend(std::iter::repeat("backbone").take(n_bb));
        v.extend(std::iter::repeat("peak-encoder").take(n_enc));
        v.extend(std::iter::repeat("head").take(n_head));
        v.push("force-matrix");
        v
    }

    /// Persistent state: trainable parameters plus BN running statistics.
    fn state_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.backbone.state();
        for enc in self.encoders.iter_mut().flatten() {
            v.extend(enc.state());
        }
        v.extend(self.head.pairs().into_iter().map(|(p, _)| p));
        v.push(&mut self.w_f);
        v
    }
}

// ---------------------------------------------------------------------
// Checkpoint persistence: binary parameters + JSON metadata sidecar.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPXA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ActorConfig,
    /// Hex SHA-256 of the device JSON the actor was trained against.
    pub device_fingerprint: String,
    pub n_values: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// The metadata sidecar sits next to the binary file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", path.display()))
}

impl Actor {
    pub fn save(&mut self, path: &Path, device_fingerprint: &str) -> Result<(), CheckpointError> {
        let mut values: Vec<f64> = Vec::new();
        for buf in self.state_mut() {
            values.extend_from_slice(buf);
        }
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(values.len() as u64).to_le_bytes())?;
        for v in &values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;

        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            device_fingerprint: device_fingerprint.to_string(),
            n_values: values.len() as u64,
        };
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        fs::write(sidecar_path(path), text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Actor, CheckpointMeta), CheckpointError> {
        let meta_text = fs::read_to_string(sidecar_path(path))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)
            .map_err(|e| CheckpointError::Format(format!("sidecar: {e}")))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        meta.config.validate().map_err(CheckpointError::Format)?;

        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if n != meta.n_values {
            return Err(CheckpointError::Format("sidecar/binary value count mismatch".into()));
        }
        if bytes.len() != 16 + 8 * n as usize {
            return Err(CheckpointError::Format("truncated or oversized parameter block".into()));
        }

        let mut actor = Actor::new(&meta.config, 0);
        let mut off = 16;
        let mut remaining = n as usize;
        for buf in actor.state_mut() {
            if buf.len() > remaining {
                return Err(CheckpointError::Format(
                    "parameter count does not match the config".into(),
                ));
            }
            for v in buf.iter_mut() {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(CheckpointError::Format("non-finite parameter".into()));
                }
                off += 8;
            }
            remaining -= buf.len();
        }
        if remaining != 0 {
            return Err(CheckpointError::Format(
                "parameter count does not match the config".into(),
            ));
        }
        Ok((actor, meta))
    }
}
