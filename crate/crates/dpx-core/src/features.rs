//! Assembly of the actor's input features from a sweep.
//!
//! The actor consumes, per state: the three dB curves scaled to roughly
//! unit range, the 20-element forces vector, per-curve normalized peak
//! lists, and the 8 S21 shape-regression coefficients.

use crate::metrics::{self, PEAK_AMP_SCALE_DB, PEAK_MIN_PROMINENCE_DB};
use crate::sim::{Device, SweepState};

/// dB values are divided by this before entering the network. Shared
/// with the peak-amplitude normalizer so curves and peaks line up.
pub const CURVE_SCALE_DB: f64 = PEAK_AMP_SCALE_DB;

/// Everything the actor sees for one device state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorInput {
    /// S11, S21, S31 in that order, each dB/[`CURVE_SCALE_DB`].
    pub curves: [Vec<f64>; 3],
    /// 20 subarea forces in [0, 1] (low band then high band).
    pub forces: Vec<f64>,
    /// Per curve: normalized (position, amplitude) peak pairs.
    pub peaks: [Vec<(f64, f64)>; 3],
    /// 8 S21 regression coefficients, scaled by 1/[`CURVE_SCALE_DB`].
    pub shape: Vec<f64>,
}

/// Builds the actor input from raw (unscaled) dB curves.
pub fn actor_input_from_curves(
    device: &Device,
    s11_db: &[f64],
    s21_db: &[f64],
    s31_db: &[f64],
) -> ActorInput {
    let sweep = SweepState {
        s11_db: s11_db.to_vec(),
        s21_db: s21_db.to_vec(),
        s31_db: s31_db.to_vec(),
    };
    actor_input(device, &sweep)
}

/// Builds the actor input for a sweep of `device`.
pub fn actor_input(device: &Device, sweep: &SweepState) -> ActorInput {
    let n = sweep.s11_db.len();
    let scale = |c: &[f64]| c.iter().map(|v| v / CURVE_SCALE_DB).collect::<Vec<f64>>();
    let peaks_of = |c: &[f64]| {
        metrics::find_peaks(c, PEAK_MIN_PROMINENCE_DB)
            .iter()
            .map(|p| p.normalized(n))
            .collect::<Vec<(f64, f64)>>()
    };
    let shape = metrics::s21_shape(device, sweep)
        .to_vec()
        .iter()
        .map(|v| v / CURVE_SCALE_DB)
        .collect();
    ActorInput {
        curves: [scale(&sweep.s11_db), scale(&sweep.s21_db), scale(&sweep.s31_db)],
        forces: metrics::forces(device, sweep),
        peaks: [peaks_of(&sweep.s11_db), peaks_of(&sweep.s21_db), peaks_of(&sweep.s31_db)],
        shape,
    }
}
