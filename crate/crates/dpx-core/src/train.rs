//! Dataset collection, the banded tolerance loss, the training loop, and
//! generalization evaluation.
//!
//! A dataset record pairs a sweep captured from a randomized device with
//! the action that would tune it in one move (`golden − positions`, and
//! golden is the zero vector). The loss is the tolerance-banded L1
//! regression `mean_i max(0, |pred_i − target_i| − δ_i)·k_i`: deviations
//! inside a screw's tolerance band cost nothing, beyond it the cost grows
//! linearly with a sensitivity-derived weight.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::actor::{Actor, ActorConfig};
use crate::exec;
use crate::features::{actor_input, ActorInput};
use crate::nn::{cosine_lr, Adam, Mat};
use crate::sim::{device_fingerprint_bytes, sweep, Device, SimError};

pub const DATASET_MAGIC: &[u8; 4] = b"DPXD";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_CURVES: usize = 3;

/// One supervised example: the captured curves, the true action that tunes
/// the device in a single move, and the screw positions at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// S11, S21, S31 in dB, unscaled.
    pub curves: [Vec<f64>; 3],
    /// golden − positions, in turns.
    pub action: Vec<f64>,
    /// Absolute screw positions at capture time, in turns.
    pub positions: Vec<f64>,
}

/// An in-memory dataset plus the fingerprint of the device it was
/// collected from. Values are stored after rounding through `f32` so that
/// a dataset is bit-identical whether it was just collected or read back
/// from its file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_points: usize,
    pub n_screws: usize,
    pub device_fingerprint: [u8; 32],
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn matches_device(&self, device: &Device) -> bool {
        self.device_fingerprint == device_fingerprint_bytes(device)
            && self.n_points == device.n_points()
            && self.n_screws == device.n_screws()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_points as u32).to_le_bytes())?;
        w.write_all(&(DATASET_CURVES as u32).to_le_bytes())?;
        w.write_all(&(self.n_screws as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&self.device_fingerprint)?;
        let mut buf = Vec::new();
        for rec in &self.records {
            buf.clear();
            for curve in &rec.curves {
                for &v in curve {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            for &v in &rec.action {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in &rec.positions {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(DatasetError::Format(format!(
                "bad magic {magic:?}, expected {DATASET_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Format(format!(
                "unsupported version {version}, expected {DATASET_VERSION}"
            )));
        }
        let n_points = read_u32(&mut r)? as usize;
        let n_curves = read_u32(&mut r)? as usize;
        if n_curves != DATASET_CURVES {
            return Err(DatasetError::Format(format!(
                "expected {DATASET_CURVES} curves per record, file has {n_curves}"
            )));
        }
        let n_screws = read_u32(&mut r)? as usize;
        let n_records = read_u64(&mut r)? as usize;
        let mut device_fingerprint = [0u8; 32];
        r.read_exact(&mut device_fingerprint)?;

        let rec_floats = DATASET_CURVES * n_points + 2 * n_screws;
        let mut records = Vec::with_capacity(n_records);
        let mut buf = vec![0u8; rec_floats * 4];
        for i in 0..n_records {
            r.read_exact(&mut buf).map_err(|e| {
                DatasetError::Format(format!("truncated record {i} of {n_records}: {e}"))
            })?;
            let mut vals = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
            let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
            let curves = [take(n_points), take(n_points), take(n_points)];
            let action = take(n_screws);
            let positions = take(n_screws);
            records.push(DatasetRecord { curves, action, positions });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(DatasetError::Format("trailing bytes after final record".into()));
        }
        Ok(Dataset { n_points, n_screws, device_fingerprint, records })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DatasetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DatasetError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// ---------------------------------------------------------------------
// Eq.-style banded loss.

/// `mean_i max(0, |pred_i − target_i| − δ_i)·k_i`.
pub fn banded_loss(pred: &[f64], target: &[f64], delta: &[f64], k: &[f64]) -> f64 {
    let n = pred.len();
    assert!(n > 0 && target.len() == n && delta.len() == n && k.len() == n);
    let mut sum = 0.0;
    for i in 0..n {
        let excess = (pred[i] - target[i]).abs() - delta[i];
        // Not `.max(0.0)`: a NaN prediction must yield a NaN loss, not 0.
        if !(excess <= 0.0) {
            sum += excess * k[i];
        }
    }
    sum / n as f64
}

/// Mean of [`banded_loss`] over the rows of a batch, and its gradient with
/// respect to `pred`. The subgradient at the kink is zero.
pub fn banded_loss_batch(pred: &Mat, target: &Mat, delta: &[f64], k: &[f64]) -> (f64, Mat) {
    let (n, s) = (pred.rows, pred.cols);
    assert!(n > 0 && target.rows == n && target.cols == s);
    assert!(delta.len() == s && k.len() == s);
    let mut grad = Mat::zeros(n, s);
    let mut total = 0.0;
    let scale = 1.0 / (n as f64 * s as f64);
    for r in 0..n {
        let (p, t) = (pred.row(r), target.row(r));
        let g = grad.row_mut(r);
        for i in 0..s {
            let diff = p[i] - t[i];
            let excess = diff.abs() - delta[i];
            // `!(excess <= 0)` rather than `excess > 0` so a NaN
            // prediction poisons the total instead of scoring zero.
            if !(excess <= 0.0) {
                total += excess * k[i];
                if excess > 0.0 {
                    g[i] = k[i] * diff.signum() * scale;
                }
            }
        }
    }
    (total / (n as f64 * s as f64), grad)
}

/// Loss of the always-zero predictor: `mean(max(0, |target| − δ)·k)` over
/// every record. The reference any trained actor must beat.
pub fn zero_predictor_baseline(dataset: &Dataset, delta: &[f64], k: &[f64]) -> f64 {
    assert!(!dataset.is_empty());
    let zeros = vec![0.0; dataset.n_screws];
    let sum: f64 =
        dataset.records.iter().map(|r| banded_loss(&zeros, &r.action, delta, k)).sum();
    sum / dataset.len() as f64
}

// ---------------------------------------------------------------------
// Dataset collection.

/// Policy applied during roll-in steps before capturing a record.
#[derive(Clone, Copy)]
pub enum RollInPolicy<'a> {
    /// Uniform random rotations within ±¼ of the device's randomization
    /// magnitude — the "other algorithm" stand-in.
    Random,
    /// The current actor proposes each roll-in action.
    Actor(&'a Actor),
    /// Applies the exact true action (diagnostic; lands on the tuned
    /// state, so subsequent records have zero action).
    Oracle,
}

#[derive(Clone, Copy)]
pub struct CollectOptions<'a> {
    pub n_records: usize,
    /// Per-record randomization magnitude, as a uniform fraction range of
    /// the device's `default_magnitude_turns`. `(1.0, 1.0)` reproduces the
    /// plain untuned distribution; a lower floor mixes in partially tuned
    /// states such as those the solver visits mid-run.
    pub magnitude_range: (f64, f64),
    pub roll_in_steps: usize,
    pub policy: RollInPolicy<'a>,
    pub seed: u64,
}

impl<'a> CollectOptions<'a> {
    pub fn new(n_records: usize, seed: u64) -> Self {
        CollectOptions {
            n_records,
            magnitude_range: (1.0, 1.0),
            roll_in_steps: 0,
            policy: RollInPolicy::Random,
            seed,
        }
    }
}

fn round_f32(xs: &mut [f64]) {
    for v in xs.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Collects `n_records` supervised examples in parallel. Each record owns
/// an independent RNG stream, so the result is bit-identical for any
/// thread count and any chunking.
pub fn collect_dataset(device: &Device, opts: &CollectOptions) -> Result<Dataset, SimError> {
    let travel = device.travel_turns;
    let (lo, hi) = opts.magnitude_range;
    assert!(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi);

    let chunks = exec::map_ranges(opts.n_records, 1, |range| -> Result<Vec<DatasetRecord>, SimError> {
        let mut out = Vec::with_capacity(range.len());
        for rec_idx in range {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(rec_idx as u64);
            let frac = if lo == hi { lo } else { rng.gen_range(lo..hi) };
            let magnitude = device.default_magnitude_turns * frac;
            let mut positions = device.random_positions(magnitude, &mut rng);

            for _ in 0..opts.roll_in_steps {
                let state = sweep(device, &positions)?;
                let action: Vec<f64> = match opts.policy {
                    RollInPolicy::Random => {
                        let a = 0.25 * device.default_magnitude_turns;
                        (0..positions.len()).map(|_| rng.gen_range(-a..=a)).collect()
                    }
                    RollInPolicy::Actor(actor) => {
                        let input = actor_input(device, &state);
                        let act = actor.forward(std::slice::from_ref(&input));
                        act.data
                    }
                    RollInPolicy::Oracle => positions.iter().map(|p| -p).collect(),
                };
                for (p, a) in positions.iter_mut().zip(&action) {
                    *p = (*p + a).clamp(-travel, travel);
                }
            }

            let state = sweep(device, &positions)?;
            let mut action: Vec<f64> = positions.iter().map(|p| -p).collect();
            let mut curves =
                [state.s11_db.clone(), state.s21_db.clone(), state.s31_db.clone()];
            for c in curves.iter_mut() {
                round_f32(c);
            }
            round_f32(&mut action);
            round_f32(&mut positions);
            out.push(DatasetRecord { curves, action, positions });
        }
        Ok(out)
    });

    let mut records = Vec::with_capacity(opts.n_records);
    for chunk in chunks {
        records.extend(chunk?);
    }
    Ok(Dataset {
        n_points: device.n_points(),
        n_screws: device.n_screws(),
        device_fingerprint: device_fingerprint_bytes(device),
        records,
    })
}

// ---------------------------------------------------------------------
// Training.

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Cosine-decay the learning rate to zero over the planned steps.
    pub cosine_schedule: bool,
    /// Stop once an epoch's training loss falls below this value.
    pub stop_at_train_loss: Option<f64>,
    /// Stop when the held-out loss has not improved for this many epochs.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Per-screw tolerance band δ, in turns.
    pub delta: Vec<f64>,
    /// Per-screw weight k ∈ [1, 10].
    pub k: Vec<f64>,
}

impl TrainingConfig {
    /// Defaults with δ and k copied from the device.
    pub fn for_device(device: &Device) -> Self {
        TrainingConfig {
            batch_size: 64,
            lr: 3e-4,
            epochs: 100,
            cosine_schedule: true,
            stop_at_train_loss: None,
            patience: None,
            seed: 0,
            delta: device.tolerances(),
            k: device.weights(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return Err("lr must be > 0".into());
        }
        if self.delta.iter().any(|&d| !(d > 0.0)) {
            return Err("every delta must be > 0".into());
        }
        if self.k.iter().any(|&k| !(1.0..=10.0).contains(&k)) {
            return Err("every k must lie in [1, 10]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Empty when no held-out set was given.
    pub held_out_loss: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    BadConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("dataset fingerprint does not match the device")]
    FingerprintMismatch,
    #[error("loss became non-finite at epoch {epoch}, step {step}; returning the last finite parameters")]
    Diverged {
        epoch: usize,
        step: usize,
        /// Parameters as of the end of the last fully finite epoch.
        last_finite: Box<Actor>,
        history: TrainHistory,
    },
}

fn precompute_inputs(device: &Device, dataset: &Dataset) -> Vec<ActorInput> {
    let parts = exec::map_ranges(dataset.len(), 8, |range| {
        range
            .map(|i| {
                let rec = &dataset.records[i];
                crate::features::actor_input_from_curves(
                    device,
                    &rec.curves[0],
                    &rec.curves[1],
                    &rec.curves[2],
                )
            })
            .collect::<Vec<_>>()
    });
    parts.into_iter().flatten().collect()
}

fn targets_of(dataset: &Dataset) -> Mat {
    let mut t = Mat::zeros(dataset.len(), dataset.n_screws);
    for (i, rec) in dataset.records.iter().enumerate() {
        t.row_mut(i).copy_from_slice(&rec.action);
    }
    t
}

/// Mean banded loss of `actor` over a dataset in inference mode.
pub fn eval_loss(
    actor: &Actor,
    device: &Device,
    dataset: &Dataset,
    delta: &[f64],
    k: &[f64],
    batch_size: usize,
) -> f64 {
    assert!(!dataset.is_empty());
    let inputs = precompute_inputs(device, dataset);
    eval_loss_inputs(actor, &inputs, dataset, delta, k, batch_size)
}

fn eval_loss_inputs(
    actor: &Actor,
    inputs: &[ActorInput],
    dataset: &Dataset,
    delta: &[f64],
    k: &[f64],
    batch_size: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut start = 0;
    while start < inputs.len() {
        let end = (start + batch_size).min(inputs.len());
        let pred = actor.forward(&inputs[start..end]);
        for (r, rec) in dataset.records[start..end].iter().enumerate() {
            sum += banded_loss(pred.row(r), &rec.action, delta, k);
        }
        start = end;
    }
    sum / inputs.len() as f64
}

/// Trains a fresh actor on `train_set`, minimizing the banded loss with
/// Adam. Returns the actor at the best held-out epoch (or the final epoch
/// when no held-out set is given) together with the loss history.
pub fn train(
    device: &Device,
    train_set: &Dataset,
    held_out: Option<&Dataset>,
    actor_config: &ActorConfig,
    config: &TrainingConfig,
) -> Result<(Actor, TrainHistory), TrainError> {
    config.validate().map_err(TrainError::BadConfig)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !train_set.matches_device(device)
        || held_out.is_some_and(|h| !h.matches_device(device))
    {
        return Err(TrainError::FingerprintMismatch);
    }

    let mut actor = Actor::new(actor_config, config.seed);
    let inputs = precompute_inputs(device, train_set);
    let targets = targets_of(train_set);
    let held_inputs = held_out.map(|h| precompute_inputs(device, h));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let n = train_set.len();
    let n_batches = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * n_batches;
    let mut adam = Adam::new(actor.n_params());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    let mut best: Option<(f64, Actor)> = None;
    let mut last_finite = actor.clone();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let batch_inputs: Vec<ActorInput> =
                batch.iter().map(|&i| inputs[i].clone()).collect();
            let mut batch_targets = Mat::zeros(batch.len(), train_set.n_screws);
            for (r, &i) in batch.iter().enumerate() {
                batch_targets.row_mut(r).copy_from_slice(targets.row(i));
            }

            let (pred, cache) = actor.forward_train(&batch_inputs);
            let (loss, dpred) = banded_loss_batch(&pred, &batch_targets, &config.delta, &config.k);
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    last_finite: Box::new(last_finite),
                    history,
                });
            }
            epoch_sum += loss * batch.len() as f64;

            actor.zero_grads();
            actor.backward(&cache, &dpred);
            let lr = if config.cosine_schedule {
                cosine_lr(config.lr, step as u64, total_steps as u64)
            } else {
                config.lr
            };
            let mut pairs = actor.pairs();
            let mut ps: Vec<&mut [f64]> = Vec::with_capacity(pairs.len());
            let mut gs: Vec<&[f64]> = Vec::with_capacity(pairs.len());
            for (p, g) in pairs.iter_mut() {
                ps.push(p.as_mut_slice());
                gs.push(g.as_slice());
            }
            adam.step(lr, &mut ps, &gs);
            step += 1;
        }
        let train_loss = epoch_sum / n as f64;
        history.train_loss.push(train_loss);
        last_finite = actor.clone();

        if let (Some(h), Some(hi)) = (held_out, held_inputs.as_ref()) {
            let hl =
                eval_loss_inputs(&actor, hi, h, &config.delta, &config.k, config.batch_size);
            history.held_out_loss.push(hl);
            if best.as_ref().map_or(true, |(b, _)| hl < *b) {
                history.best_epoch = epoch;
                best = Some((hl, actor.clone()));
            }
            if let Some(p) = config.patience {
                if epoch - history.best_epoch >= p {
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }

        if config.stop_at_train_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }

    if let Some((_, b)) = best {
        actor = b;
    }
    Ok((actor, history))
}

/// One generalization-table row: the actor's loss and the zero-predictor
/// baseline on the same set.
#[derive(Debug, Clone)]
pub struct GenRow {
    pub loss: f64,
    pub baseline: f64,
}

/// Scores the actor on each dataset (no parameter updates) alongside the
/// zero-predictor baseline.
pub fn eval_generalization(
    actor: &Actor,
    device: &Device,
    datasets: &[&Dataset],
    delta: &[f64],
    k: &[f64],
    batch_size: usize,
) -> Result<Vec<GenRow>, TrainError> {
    let mut rows = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if ds.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if !ds.matches_device(device) {
            return Err(TrainError::FingerprintMismatch);
        }
        rows.push(GenRow {
            loss: eval_loss(actor, device, ds, delta, k, batch_size),
            baseline: zero_predictor_baseline(ds, delta, k),
        });
    }
    Ok(rows)
}
