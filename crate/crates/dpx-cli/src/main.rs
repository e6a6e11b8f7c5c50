//! `dpx` — command-line front end for the duplexer tuning toolkit.
//!
//! Subcommands cover the whole pipeline: `synth` builds a calibrated
//! device, `gen-data` collects supervised datasets, `train` fits the
//! actor, `eval-gen` scores generalization, `tune` runs the closed-loop
//! solver, and `peaks`/`area` are sweep diagnostics.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 file-format error.

mod overrides;
mod sweep_csv;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpx_core::actor::{Actor, ActorConfig};
use dpx_core::metrics::{find_peaks, passband_areas, PEAK_MIN_PROMINENCE_DB};
use dpx_core::sim::{
    device_fingerprint, load_device, save_device, sweep, synthesize_device, Device,
    DeviceFileError, DuplexerSpec, SweepState,
};
use dpx_core::solver::{tune, ActorPolicy, SimEnvironment, SolverConfig};
use dpx_core::train::{
    collect_dataset, eval_generalization, train, CollectOptions, Dataset, DatasetError,
    RollInPolicy, TrainError, TrainingConfig,
};

use overrides::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, overrides, or inconsistent inputs (exit 2).
    Config(String),
    /// Simulation or optimization failure (exit 3).
    Numeric(String),
    /// Malformed input files (exit 4).
    Format(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Format(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Format(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "dpx", version, about = "Cavity duplexer tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a calibrated device from a spec JSON or a preset.
    Synth {
        /// Spec JSON path (alternative to --preset).
        spec: Option<PathBuf>,
        /// Built-in spec: "desk" (14 screws) or "full" (30 screws).
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// Device JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the golden-state sweep as CSV.
        #[arg(long)]
        sweep_out: Option<PathBuf>,
    },
    /// Collect a supervised dataset from randomized device states.
    GenData {
        #[arg(long)]
        device: PathBuf,
        /// Number of records.
        #[arg(long)]
        n: usize,
        /// Policy steps applied before capturing each record.
        #[arg(long, default_value_t = 0)]
        roll_in: usize,
        /// Actor checkpoint driving the roll-in (random policy if absent).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset output path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides, e.g. collect.magnitude_lo=0.2
        #[arg(long = "config")]
        config: Vec<String>,
    },
    /// Train an actor on a dataset.
    Train {
        #[arg(long)]
        device: PathBuf,
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for best-epoch selection.
        #[arg(long)]
        held_out: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Per-epoch loss history CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides, e.g. actor.nchan=16 train.epochs=50
        #[arg(long = "config")]
        config: Vec<String>,
    },
    /// Score an actor on one or more datasets against the zero-predictor
    /// baseline.
    EvalGen {
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset path; repeat for several sets.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Table output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune a randomly detuned device with the closed-loop solver.
    Tune {
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Seed for the initial detuning and the screw grouping.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tune report JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Final sweep CSV output path.
        #[arg(long)]
        sweep_out: Option<PathBuf>,
        /// Overrides, e.g. solver.max_fine_steps=50 collect.magnitude_hi=0.8
        #[arg(long = "config")]
        config: Vec<String>,
    },
    /// List reflection/transmission peaks of a sweep.
    Peaks {
        #[arg(long)]
        device: PathBuf,
        /// Sweep CSV to analyze; defaults to sweeping the device.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Random detuning seed; golden positions if absent.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the tuning-metric areas of a sweep.
    Area {
        #[arg(long)]
        device: PathBuf,
        /// Sweep CSV to analyze; defaults to sweeping the device.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Random detuning seed; golden positions if absent.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dpx_core::exec::init_from_env() {
        eprintln!("dpx: {e}");
        std::process::exit(2);
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("dpx: {e}");
        std::process::exit(e.code());
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Synth { spec, preset, out, sweep_out } => cmd_synth(spec, preset, &out, sweep_out),
        Cmd::GenData { device, n, roll_in, ckpt, seed, out, config } => {
            cmd_gen_data(&device, n, roll_in, ckpt, seed, &out, &config)
        }
        Cmd::Train { device, data, held_out, ckpt, out, seed, config } => {
            cmd_train(&device, &data, held_out, &ckpt, out, seed, &config)
        }
        Cmd::EvalGen { device, ckpt, data, out } => cmd_eval_gen(&device, &ckpt, &data, out),
        Cmd::Tune { device, ckpt, seed, out, sweep_out, config } => {
            cmd_tune(&device, &ckpt, seed, out, sweep_out, &config)
        }
        Cmd::Peaks { device, data, seed, out } => cmd_peaks(&device, data, seed, out),
        Cmd::Area { device, data, seed, out } => cmd_area(&device, data, seed, out),
    }
}

// ---------------------------------------------------------------------
// Shared loading and error mapping.

fn load_device_checked(path: &Path) -> Result<Device, CliError> {
    load_device(path).map_err(|e| match e {
        DeviceFileError::Io(err) => {
            CliError::Config(format!("cannot read {}: {err}", path.display()))
        }
        e @ (DeviceFileError::Parse { .. } | DeviceFileError::Invalid(_)) => {
            CliError::Format(format!("{}: {e}", path.display()))
        }
    })
}

fn load_dataset_checked(path: &Path, device: &Device) -> Result<Dataset, CliError> {
    let ds = Dataset::load(path).map_err(|e| match e {
        DatasetError::Io(err) => {
            CliError::Config(format!("cannot read {}: {err}", path.display()))
        }
        DatasetError::Format(msg) => CliError::Format(format!("{}: {msg}", path.display())),
    })?;
    if !ds.matches_device(device) {
        return Err(CliError::Config(format!(
            "{}: dataset does not match the device (fingerprint or shape)",
            path.display()
        )));
    }
    Ok(ds)
}

fn load_actor_checked(path: &Path, device: &Device) -> Result<Actor, CliError> {
    use dpx_core::actor::CheckpointError;
    let (actor, meta) = Actor::load(path).map_err(|e| match e {
        CheckpointError::Io(err) => {
            CliError::Config(format!("cannot read {}: {err}", path.display()))
        }
        CheckpointError::Format(msg) => CliError::Format(format!("{}: {msg}", path.display())),
    })?;
    if meta.config.n_screws != device.n_screws() {
        return Err(CliError::Config(format!(
            "{}: checkpoint drives {} screws but the device has {}",
            path.display(),
            meta.config.n_screws,
            device.n_screws()
        )));
    }
    if meta.config.n_points != device.n_points() {
        return Err(CliError::Config(format!(
            "{}: checkpoint expects {} sweep points but the device produces {}",
            path.display(),
            meta.config.n_points,
            device.n_points()
        )));
    }
    if meta.device_fingerprint != device_fingerprint(device) {
        return Err(CliError::Config(format!(
            "{}: checkpoint was trained for a different device (fingerprint mismatch)",
            path.display()
        )));
    }
    Ok(actor)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn obtain_sweep(
    device: &Device,
    data: Option<&Path>,
    seed: Option<u64>,
) -> Result<SweepState, CliError> {
    match data {
        Some(p) => sweep_csv::read_sweep(p, device),
        None => {
            let positions = match seed {
                Some(s) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    device.random_positions(device.default_magnitude_turns, &mut rng)
                }
                None => device.golden_positions(),
            };
            sweep(device, &positions).map_err(|e| CliError::Numeric(e.to_string()))
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------
// Commands.

fn cmd_synth(
    spec_path: Option<PathBuf>,
    preset: Option<String>,
    out: &Path,
    sweep_out: Option<PathBuf>,
) -> Result<(), CliError> {
    let spec = match (spec_path, preset) {
        (Some(p), None) => parse_spec(&p)?,
        (None, Some(name)) => match name.as_str() {
            "desk" => DuplexerSpec::desk(),
            "full" => DuplexerSpec::full(),
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset {other:?} (expected \"desk\" or \"full\")"
                )))
            }
        },
        _ => {
            return Err(CliError::Config(
                "give a spec JSON path or --preset, but not both".into(),
            ))
        }
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let device =
        synthesize_device(&spec).map_err(|e| CliError::Numeric(format!("synthesis: {e}")))?;
    save_device(&device, out)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "device: {} screws, {} sweep points, fingerprint {}",
        device.n_screws(),
        device.n_points(),
        device_fingerprint(&device)
    );
    println!("wrote {}", out.display());
    if let Some(sp) = sweep_out {
        let state = sweep(&device, &device.golden_positions())
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        sweep_csv::write_sweep(&sp, &device, &state)?;
        println!("wrote {}", sp.display());
    }
    Ok(())
}

fn parse_spec(path: &Path) -> Result<DuplexerSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        let byte = byte_offset(&text, e.line(), e.column());
        CliError::Format(format!(
            "{}: malformed spec JSON at line {}, column {} (byte offset {byte}): {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1);
        }
        off += l.len() + 1;
    }
    text.len()
}

fn cmd_gen_data(
    device_path: &Path,
    n: usize,
    roll_in: usize,
    ckpt: Option<PathBuf>,
    seed: u64,
    out: &Path,
    config: &[String],
) -> Result<(), CliError> {
    let device = load_device_checked(device_path)?;
    let mut ov = Overrides::new(None, None, None);
    ov.apply_all(config)?;
    let actor = match &ckpt {
        Some(p) => Some(load_actor_checked(p, &device)?),
        None => None,
    };
    let opts = CollectOptions {
        n_records: n,
        magnitude_range: (ov.collect.magnitude_lo, ov.collect.magnitude_hi),
        roll_in_steps: roll_in,
        policy: match &actor {
            Some(a) => RollInPolicy::Actor(a),
            None => RollInPolicy::Random,
        },
        seed,
    };
    let ds = collect_dataset(&device, &opts)
        .map_err(|e| CliError::Numeric(format!("collection: {e}")))?;
    ds.save(out)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;

    println!("records: {}", ds.len());
    if !ds.is_empty() {
        let mut lows = Vec::with_capacity(ds.len());
        let mut highs = Vec::with_capacity(ds.len());
        for rec in &ds.records {
            let state = SweepState {
                s11_db: rec.curves[0].clone(),
                s21_db: rec.curves[1].clone(),
                s31_db: rec.curves[2].clone(),
            };
            let (lo, hi) = passband_areas(&device, &state);
            lows.push(lo);
            highs.push(hi);
        }
        println!(
            "median areas: low {:.1}, high {:.1}",
            median(&mut lows),
            median(&mut highs)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn history_csv(history: &dpx_core::train::TrainHistory) -> String {
    let mut text = String::from("epoch,train_loss,held_out_loss\n");
    for (i, t) in history.train_loss.iter().enumerate() {
        let h = history
            .held_out_loss
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        text.push_str(&format!("{i},{t},{h}\n"));
    }
    text
}

fn cmd_train(
    device_path: &Path,
    data: &Path,
    held_out: Option<PathBuf>,
    ckpt: &Path,
    out: Option<PathBuf>,
    seed: u64,
    config: &[String],
) -> Result<(), CliError> {
    let device = load_device_checked(device_path)?;
    let train_set = load_dataset_checked(data, &device)?;
    let held = match &held_out {
        Some(p) => Some(load_dataset_checked(p, &device)?),
        None => None,
    };

    // Actor preset scales with the device; override via --config actor.*.
    let actor_default = if device.spec.resonators_per_channel >= 8 {
        ActorConfig::full(device.n_screws(), device.n_points())
    } else {
        ActorConfig::desk(device.n_screws(), device.n_points())
    };
    let mut train_default = TrainingConfig::for_device(&device);
    train_default.seed = seed;
    let mut ov = Overrides::new(Some(actor_default), Some(train_default), None);
    ov.apply_all(config)?;
    let actor_config = ov.actor.unwrap();
    let training_config = ov.train.unwrap();
    actor_config
        .validate()
        .map_err(|e| CliError::Config(format!("actor config: {e}")))?;

    let fp = device_fingerprint(&device);
    match train(&device, &train_set, held.as_ref(), &actor_config, &training_config) {
        Ok((mut actor, history)) => {
            actor
                .save(ckpt, &fp)
                .map_err(|e| CliError::Config(format!("cannot write {}: {e}", ckpt.display())))?;
            if let Some(p) = &out {
                write_text(p, &history_csv(&history))?;
            }
            let last = history.train_loss.last().copied().unwrap_or(f64::NAN);
            println!("epochs: {}", history.train_loss.len());
            println!("final train loss: {last}");
            if !history.held_out_loss.is_empty() {
                println!(
                    "best held-out loss: {} (epoch {})",
                    history.held_out_loss[history.best_epoch], history.best_epoch
                );
            }
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        Err(TrainError::Diverged { epoch, step, last_finite, history }) => {
            let mut actor = *last_finite;
            // Keep the last finite parameters so the run is not lost.
            actor
                .save(ckpt, &fp)
                .map_err(|e| CliError::Config(format!("cannot write {}: {e}", ckpt.display())))?;
            if let Some(p) = &out {
                write_text(p, &history_csv(&history))?;
            }
            Err(CliError::Numeric(format!(
                "loss became non-finite at epoch {epoch}, step {step}; \
                 saved the last finite checkpoint to {}",
                ckpt.display()
            )))
        }
        Err(e @ (TrainError::BadConfig(_) | TrainError::EmptyDataset
            | TrainError::FingerprintMismatch)) => Err(CliError::Config(e.to_string())),
    }
}

fn cmd_eval_gen(
    device_path: &Path,
    ckpt: &Path,
    data: &[PathBuf],
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let device = load_device_checked(device_path)?;
    let actor = load_actor_checked(ckpt, &device)?;
    let mut sets = Vec::new();
    for p in data {
        sets.push(load_dataset_checked(p, &device)?);
    }
    let refs: Vec<&Dataset> = sets.iter().collect();
    let delta = device.tolerances();
    let k = device.weights();
    let rows = eval_generalization(&actor, &device, &refs, &delta, &k, 64)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut table = String::from("set,loss,baseline\n");
    for (path, row) in data.iter().zip(&rows) {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        table.push_str(&format!("{name},{},{}\n", row.loss, row.baseline));
    }
    print!("{table}");
    if let Some(p) = &out {
        write_text(p, &table)?;
    }
    Ok(())
}

fn cmd_tune(
    device_path: &Path,
    ckpt: &Path,
    seed: u64,
    out: Option<PathBuf>,
    sweep_out: Option<PathBuf>,
    config: &[String],
) -> Result<(), CliError> {
    let device = load_device_checked(device_path)?;
    let actor = load_actor_checked(ckpt, &device)?;
    let mut ov = Overrides::new(None, None, Some(SolverConfig { seed, ..Default::default() }));
    ov.apply_all(config)?;
    let solver_config = ov.solver.unwrap();
    solver_config
        .validate()
        .map_err(|e| CliError::Config(format!("solver config: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let magnitude = device.default_magnitude_turns * ov.collect.magnitude_hi;
    let positions = device.random_positions(magnitude, &mut rng);
    let mut env = SimEnvironment::new(&device, positions);
    let policy = ActorPolicy { device: &device, actor: &actor };

    let report = match tune(&mut env, &policy, &solver_config) {
        Ok(r) => r,
        Err(boxed) => {
            if let Some(p) = &out {
                let json = serde_json::to_string_pretty(&boxed.partial)
                    .expect("report serialization cannot fail");
                write_text(p, &(json + "\n"))?;
            }
            return Err(CliError::Numeric(boxed.error.to_string()));
        }
    };

    let initial = report
        .metric_trace
        .first()
        .map(|m| m.area_sum)
        .unwrap_or(f64::NAN);
    println!("initial area sum: {initial:.1}");
    println!("final area sum: {:.1}", report.final_area_sum);
    println!("fine steps: {}", report.fine_steps);
    println!(
        "rotations: total {}, mean per screw {:.2}",
        report.total_rotations(),
        report.total_rotations() as f64 / report.rotations.len() as f64
    );
    if let Some(p) = &out {
        let json = serde_json::to_string_pretty(&report)
            .expect("report serialization cannot fail");
        write_text(p, &(json + "\n"))?;
        println!("wrote {}", p.display());
    }
    if let Some(p) = &sweep_out {
        sweep_csv::write_sweep(p, &device, &report.final_sweep)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_peaks(
    device_path: &Path,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let device = load_device_checked(device_path)?;
    let state = obtain_sweep(&device, data.as_deref(), seed)?;
    let mut table = String::from("curve,index,freq_ghz,level_db,prominence_db\n");
    for (name, curve) in ["s11", "s21", "s31"].iter().zip(state.curves()) {
        for p in find_peaks(curve, PEAK_MIN_PROMINENCE_DB) {
            table.push_str(&format!(
                "{name},{},{},{},{}\n",
                p.index,
                device.spec.plan.freq_at(p.index),
                p.level_db,
                p.prominence_db
            ));
        }
    }
    print!("{table}");
    if let Some(p) = &out {
        write_text(p, &table)?;
    }
    Ok(())
}

fn cmd_area(
    device_path: &Path,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let device = load_device_checked(device_path)?;
    let state = obtain_sweep(&device, data.as_deref(), seed)?;
    let (lo, hi) = passband_areas(&device, &state);
    let table = format!("area_low,area_high,area_sum\n{lo},{hi},{}\n", lo + hi);
    print!("{table}");
    if let Some(p) = &out {
        write_text(p, &table)?;
    }
    Ok(())
}
