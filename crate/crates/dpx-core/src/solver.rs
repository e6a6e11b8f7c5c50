//! Closed-loop tuning: a few whole-vector actor steps, then screw-group
//! fine-tuning with rollback.
//!
//! The solver first applies the policy's full action `full_steps` times.
//! It then repeats fine-tuning steps: one action is computed, the screws
//! are randomly partitioned into groups, and each group's deltas are
//! applied on their own. A group that degrades the area sum by more than
//! `revert_threshold` is rolled back (the rollback rotations count too).
//! The loop stops when a whole step improves the area sum by no more than
//! `continue_threshold`, or after `max_fine_steps` steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::Actor;
use crate::features::actor_input;
use crate::metrics::passband_areas;
use crate::sim::{sweep, Device, SimError, SweepState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Whole-vector actor steps before fine-tuning.
    pub full_steps: usize,
    /// Screws per fine-tuning group (the last group may be smaller).
    pub group_size: usize,
    /// Maximum tolerated per-group area-sum degradation (dB·points).
    pub revert_threshold: f64,
    /// Minimum per-step improvement required to keep fine-tuning.
    pub continue_threshold: f64,
    /// Safety cap on fine-tuning steps.
    pub max_fine_steps: usize,
    /// Seed for grouping and group order.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            full_steps: 2,
            group_size: 3,
            revert_threshold: 10.0,
            continue_threshold: 400.0,
            max_fine_steps: 50,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.group_size == 0 {
            return Err("group_size must be >= 1".into());
        }
        if !(self.revert_threshold >= 0.0) || !(self.continue_threshold >= 0.0) {
            return Err("thresholds must be >= 0".into());
        }
        Ok(())
    }
}

/// One reading of the environment.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub area_low: f64,
    pub area_high: f64,
    pub sweep: SweepState,
}

impl Measurement {
    pub fn area_sum(&self) -> f64 {
        self.area_low + self.area_high
    }
}

/// A tuning target: screw positions that can be moved and a measurable
/// response. The simulator implementation is [`SimEnvironment`]; tests use
/// scripted stand-ins.
pub trait Environment {
    fn n_screws(&self) -> usize;
    fn positions(&self) -> Vec<f64>;
    /// Turns each screw by the given delta (implementations may clamp).
    fn apply(&mut self, deltas: &[f64]);
    /// Restores previously read positions exactly.
    fn set_positions(&mut self, positions: &[f64]);
    fn measure(&self) -> Result<Measurement, SimError>;
}

/// Maps a measurement to a screw action.
pub trait Policy {
    fn act(&self, measurement: &Measurement) -> Vec<f64>;
}

/// The real environment: a simulated device plus its screw state.
pub struct SimEnvironment<'a> {
    device: &'a Device,
    positions: Vec<f64>,
}

impl<'a> SimEnvironment<'a> {
    pub fn new(device: &'a Device, initial_positions: Vec<f64>) -> Self {
        assert_eq!(initial_positions.len(), device.n_screws());
        SimEnvironment { device, positions: initial_positions }
    }
}

impl Environment for SimEnvironment<'_> {
    fn n_screws(&self) -> usize {
        self.device.n_screws()
    }

    fn positions(&self) -> Vec<f64> {
        self.positions.clone()
    }

    fn apply(&mut self, deltas: &[f64]) {
        let t = self.device.travel_turns;
        for (p, d) in self.positions.iter_mut().zip(deltas) {
            *p = (*p + d).clamp(-t, t);
        }
    }

    fn set_positions(&mut self, positions: &[f64]) {
        self.positions.copy_from_slice(positions);
    }

    fn measure(&self) -> Result<Measurement, SimError> {
        let state = sweep(self.device, &self.positions)?;
        let (area_low, area_high) = passband_areas(self.device, &state);
        Ok(Measurement { area_low, area_high, sweep: state })
    }
}

/// Actor-backed policy over the simulator's feature pipeline.
pub struct ActorPolicy<'a> {
    pub device: &'a Device,
    pub actor: &'a Actor,
}

impl Policy for ActorPolicy<'_> {
    fn act(&self, measurement: &Measurement) -> Vec<f64> {
        let input = actor_input(self.device, &measurement.sweep);
        self.actor.forward(std::slice::from_ref(&input)).data
    }
}

/// Metric snapshot after one solver step (or at the start).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    /// "initial", "full" or "fine".
    pub kind: String,
    pub area_low: f64,
    pub area_high: f64,
    pub area_sum: f64,
}

impl StepMetrics {
    fn of(kind: &str, m: &Measurement) -> Self {
        StepMetrics {
            kind: kind.into(),
            area_low: m.area_low,
            area_high: m.area_high,
            area_sum: m.area_sum(),
        }
    }
}

/// One group's outcome within a fine-tuning step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupOutcome {
    /// Fine-tuning step index, 0-based.
    pub fine_step: usize,
    pub screws: Vec<usize>,
    pub accepted: bool,
    /// Area sum immediately before this group was applied.
    pub area_before: f64,
    /// Area sum the solver kept after the accept/revert decision.
    pub area_after: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    /// Initial metrics followed by one entry per full and fine step.
    pub metric_trace: Vec<StepMetrics>,
    /// Per-screw rotation counts; reverts count a second time.
    pub rotations: Vec<u64>,
    pub groups: Vec<GroupOutcome>,
    pub fine_steps: usize,
    pub final_positions: Vec<f64>,
    pub final_area_low: f64,
    pub final_area_high: f64,
    pub final_area_sum: f64,
    pub final_sweep: SweepState,
}

impl TuneReport {
    fn new(n_screws: usize) -> Self {
        TuneReport {
            metric_trace: Vec::new(),
            rotations: vec![0; n_screws],
            groups: Vec::new(),
            fine_steps: 0,
            final_positions: Vec::new(),
            final_area_low: 0.0,
            final_area_high: 0.0,
            final_area_sum: 0.0,
            final_sweep: SweepState { s11_db: vec![], s21_db: vec![], s31_db: vec![] },
        }
    }

    pub fn total_rotations(&self) -> u64 {
        self.rotations.iter().sum()
    }

    fn finish(&mut self, env: &impl Environment, m: &Measurement) {
        self.final_positions = env.positions();
        self.final_area_low = m.area_low;
        self.final_area_high = m.area_high;
        self.final_area_sum = m.area_sum();
        self.final_sweep = m.sweep.clone();
    }
}

/// A sweep failure mid-run, with everything gathered so far.
#[derive(Debug, Error)]
#[error("tuning aborted: {error}")]
pub struct TuneError {
    pub error: SimError,
    pub partial: TuneReport,
}

fn apply_counted(env: &mut impl Environment, deltas: &[f64], rotations: &mut [u64]) {
    env.apply(deltas);
    for (r, d) in rotations.iter_mut().zip(deltas) {
        if *d != 0.0 {
            *r += 1;
        }
    }
}

fn count_restores(snapshot: &[f64], current: &[f64], rotations: &mut [u64]) {
    for (r, (s, c)) in rotations.iter_mut().zip(snapshot.iter().zip(current)) {
        if s != c {
            *r += 1;
        }
    }
}

/// Runs the full tuning loop and reports every step.
pub fn tune(
    env: &mut impl Environment,
    policy: &impl Policy,
    config: &SolverConfig,
) -> Result<TuneReport, Box<TuneError>> {
    config.validate().expect("invalid solver config");
    let mut report = TuneReport::new(env.n_screws());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match run_loop(env, policy, config, &mut rng, &mut report) {
        Ok(m) => {
            report.finish(env, &m);
            Ok(report)
        }
        Err(error) => Err(Box::new(TuneError { error, partial: report })),
    }
}

fn run_loop(
    env: &mut impl Environment,
    policy: &impl Policy,
    config: &SolverConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TuneReport,
) -> Result<Measurement, SimError> {
    let mut m = env.measure()?;
    report.metric_trace.push(StepMetrics::of("initial", &m));

    for _ in 0..config.full_steps {
        let action = policy.act(&m);
        apply_counted(env, &action, &mut report.rotations);
        m = env.measure()?;
        report.metric_trace.push(StepMetrics::of("full", &m));
    }

    for step in 0..config.max_fine_steps {
        let before = m.area_sum();
        m = fine_tune_step(env, policy, config, rng, m, step, report)?;
        report.fine_steps += 1;
        report.metric_trace.push(StepMetrics::of("fine", &m));
        if before - m.area_sum() <= config.continue_threshold {
            break;
        }
    }
    Ok(m)
}

/// One fine-tuning pass: a single action, applied group by group with
/// rollback. Returns the measurement the step ends on; the step's
/// improvement is `before.area_sum() − returned.area_sum()`.
fn fine_tune_step(
    env: &mut impl Environment,
    policy: &impl Policy,
    config: &SolverConfig,
    rng: &mut ChaCha8Rng,
    current: Measurement,
    fine_step: usize,
    report: &mut TuneReport,
) -> Result<Measurement, SimError> {
    let n = env.n_screws();
    // The action for the whole step; not recomputed between groups.
    let action = policy.act(&current);
    assert_eq!(action.len(), n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut groups: Vec<Vec<usize>> =
        order.chunks(config.group_size).map(|c| c.to_vec()).collect();
    groups.shuffle(rng);

    let mut m = current;
    for group in groups {
        let mut deltas = vec![0.0; n];
        for &i in &group {
            deltas[i] = action[i];
        }
        if deltas.iter().all(|&d| d == 0.0) {
            // Nothing to turn; the state cannot change.
            report.groups.push(GroupOutcome {
                fine_step,
                screws: group,
                accepted: true,
                area_before: m.area_sum(),
                area_after: m.area_sum(),
            });
            continue;
        }

        let snapshot = env.positions();
        let pre = m.area_sum();
        apply_counted(env, &deltas, &mut report.rotations);
        let tried = env.measure()?;

        if tried.area_sum() - pre > config.revert_threshold {
            // Roll back: restore the snapshot exactly; the undone turns
            // count as rotations.
            count_restores(&snapshot, &env.positions(), &mut report.rotations);
            env.set_positions(&snapshot);
            let restored = env.measure()?;
            report.groups.push(GroupOutcome {
                fine_step,
                screws: group,
                accepted: false,
                area_before: pre,
                area_after: restored.area_sum(),
            });
            m = restored;
        } else {
            report.groups.push(GroupOutcome {
                fine_step,
                screws: group,
                accepted: true,
                area_before: pre,
                area_after: tried.area_sum(),
            });
            m = tried;
        }
    }
    Ok(m)
}
