//! Benchmarks for the hot kernels: sweeps, dataset collection, actor
//! forward passes, and a full training step.
//!
//! Each kernel runs in two modes so the data-parallel path can be compared
//! against single-threaded execution in one report:
//!   * `pool`       — the global thread pool (the `parallel` feature).
//!   * `one_thread` — the same code pinned to one worker.
//!
//! Building with `--no-default-features` benches the plain sequential
//! fallback instead; its IDs say `sequential` so runs stay comparable.

use criterion::{criterion_group, criterion_main, Criterion};

use dpx_core::actor::{Actor, ActorConfig};
use dpx_core::features::{actor_input, ActorInput};
use dpx_core::nn::Adam;
use dpx_core::sim::{sweep, synthesize_device, Device, DuplexerSpec};
use dpx_core::train::{
    banded_loss_batch, collect_dataset, CollectOptions, RollInPolicy,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Runs `f` once per mode: on the ambient pool and pinned to one thread.
fn per_mode(c: &mut Criterion, group: &str, name: &str, mut f: impl FnMut() + Send) {
    #[cfg(feature = "parallel")]
    {
        let mut g = c.benchmark_group(group);
        g.bench_function(format!("{name}/pool"), |b| b.iter(&mut f));
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool");
        g.bench_function(format!("{name}/one_thread"), |b| {
            b.iter(|| one.install(&mut f))
        });
        g.finish();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut g = c.benchmark_group(group);
        g.bench_function(format!("{name}/sequential"), |b| b.iter(&mut f));
        g.finish();
    }
}

fn desk() -> Device {
    synthesize_device(&DuplexerSpec::desk()).expect("desk synthesis")
}

fn detuned_inputs(device: &Device, n: usize) -> Vec<ActorInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| {
            let pos = device.random_positions(device.default_magnitude_turns, &mut rng);
            actor_input(device, &sweep(device, &pos).expect("sweep"))
        })
        .collect()
}

fn bench_sweep(c: &mut Criterion) {
    let device = desk();
    let full = synthesize_device(&DuplexerSpec::full()).expect("full synthesis");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pos_desk = device.random_positions(device.default_magnitude_turns, &mut rng);
    let pos_full = full.random_positions(full.default_magnitude_turns, &mut rng);
    per_mode(c, "sweep", "desk_1300pts", || {
        sweep(&device, &pos_desk).expect("sweep");
    });
    per_mode(c, "sweep", "full_1300pts", || {
        sweep(&full, &pos_full).expect("sweep");
    });
}

fn bench_collect(c: &mut Criterion) {
    let device = desk();
    let opts = CollectOptions {
        n_records: 16,
        magnitude_range: (0.15, 1.0),
        roll_in_steps: 0,
        policy: RollInPolicy::Random,
        seed: 3,
    };
    per_mode(c, "collect", "records_16", || {
        collect_dataset(&device, &opts).expect("collect");
    });
}

fn bench_actor(c: &mut Criterion) {
    let device = desk();
    let config = ActorConfig::desk(device.n_screws(), device.n_points());
    let actor = Actor::new(&config, 9);
    let inputs = detuned_inputs(&device, 8);
    per_mode(c, "actor", "forward_batch8", || {
        actor.forward(&inputs);
    });
}

fn bench_train_step(c: &mut Criterion) {
    let device = desk();
    let config = ActorConfig::desk(device.n_screws(), device.n_points());
    let mut actor = Actor::new(&config, 9);
    let inputs = detuned_inputs(&device, 8);
    let targets = dpx_core::nn::Mat::zeros(8, device.n_screws());
    let delta = device.tolerances();
    let k = device.weights();
    let mut adam = Adam::new(actor.n_params());
    per_mode(c, "train", "step_batch8", || {
        actor.zero_grads();
        let (pred, cache) = actor.forward_train(&inputs);
        let (_, dpred) = banded_loss_batch(&pred, &targets, &delta, &k);
        actor.backward(&cache, &dpred);
        let mut pairs = actor.pairs();
        let mut ps: Vec<&mut [f64]> = Vec::with_capacity(pairs.len());
        let mut gs: Vec<&[f64]> = Vec::with_capacity(pairs.len());
        for (p, g) in pairs.iter_mut() {
            ps.push(p.as_mut_slice());
            gs.push(g.as_slice());
        }
        adam.step(1e-9, &mut ps, &gs);
    });
}

fn config() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .measurement_time(std::time::Duration::from_secs(4))
        .warm_up_time(std::time::Duration::from_secs(1))
}

criterion_group! {
    name = kernels;
    config = config();
    targets = bench_sweep, bench_collect, bench_actor, bench_train_step
}
criterion_main!(kernels);
