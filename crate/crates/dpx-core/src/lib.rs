//! Core library for simulating and tuning cavity duplexers.
//!
//! The crate is organised around the lifecycle of a tuning session:
//!
//! * [`sim`] — circuit-level duplexer model: Chebyshev synthesis, coupling
//!   matrices, 3-port sweeps, screw geometry, and device persistence.
//! * [`metrics`] — scalar diagnostics derived from a sweep: return-loss
//!   area, per-subrange force vectors, reflection peaks, and S21 shape
//!   coefficients.
//! * [`nn`] — minimal f64 tensor kernels (conv1d, batch norm, pooling,
//!   linear, Adam) used by the actor network.
//! * [`actor`] — the residual 1-d CNN policy that maps sweep curves and
//!   auxiliary features to screw adjustments.
//! * [`train`] — dataset collection, the banded regression loss, the
//!   training loop, and generalization evaluation.
//! * [`solver`] — the closed-loop tuner that applies the actor for two
//!   full steps and then fine-tunes screw groups with rollback.

pub mod actor;
pub mod exec;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod sim;
pub mod solver;
pub mod train;
