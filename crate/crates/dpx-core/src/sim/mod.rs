//! Circuit-level duplexer model.
//!
//! A duplexer is two coupled-resonator bandpass filters (channel A = low
//! band on port 3, channel B = high band on port 2) joined at a common
//! junction (port 1) together with an LC compensator that cancels the
//! mutual loading of the channels. Tuning screws perturb entries of the
//! channel coupling matrices; a screw position is measured in turns.

mod cheby;
mod io;
mod response;
mod synth;

pub use io::{
    device_fingerprint, device_fingerprint_bytes, load_device, load_device_from_str, save_device,
    DeviceFileError,
};
pub use response::{channel_two_port, sweep, sweep_band_s11, sweep_s_matrices, ChannelResponse};
pub use synth::synthesize_device;

use serde::{Deserialize, Serialize};

/// Inclusive frequency band in GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandGhz {
    pub lo: f64,
    pub hi: f64,
}

impl BandGhz {
    pub fn center(&self) -> f64 {
        (self.lo * self.hi).sqrt()
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Sweep grid and passband placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPlan {
    pub start_ghz: f64,
    pub stop_ghz: f64,
    pub n_points: usize,
    /// Low passband, routed to port 3.
    pub band_a: BandGhz,
    /// High passband, routed to port 2.
    pub band_b: BandGhz,
}

impl FrequencyPlan {
    pub fn default_plan() -> Self {
        FrequencyPlan {
            start_ghz: 1.80,
            stop_ghz: 2.20,
            n_points: 1300,
            band_a: BandGhz { lo: 1.81, hi: 1.89 },
            band_b: BandGhz { lo: 2.11, hi: 2.19 },
        }
    }

    pub fn step_ghz(&self) -> f64 {
        (self.stop_ghz - self.start_ghz) / (self.n_points - 1) as f64
    }

    pub fn freq_at(&self, i: usize) -> f64 {
        self.start_ghz + self.step_ghz() * i as f64
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.freq_at(i)).collect()
    }

    /// Grid index range covering `band` (smallest grid slice inside it).
    pub fn band_range(&self, band: &BandGhz) -> std::ops::Range<usize> {
        let step = self.step_ghz();
        let lo = ((band.lo - self.start_ghz) / step).ceil() as usize;
        let hi = ((band.hi - self.start_ghz) / step).floor() as usize;
        lo..(hi + 1).min(self.n_points)
    }

    pub fn band_a_range(&self) -> std::ops::Range<usize> {
        self.band_range(&self.band_a)
    }

    pub fn band_b_range(&self) -> std::ops::Range<usize> {
        self.band_range(&self.band_b)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.start_ghz > 0.0
            && self.stop_ghz > self.start_ghz
            && self.n_points >= 16
            && self.band_a.lo < self.band_a.hi
            && self.band_b.lo < self.band_b.hi
            && self.band_a.hi < self.band_b.lo
            && self.band_a.lo >= self.start_ghz
            && self.band_b.hi <= self.stop_ghz;
        if !ok {
            return Err(SimError::InvalidSpec(
                "frequency plan must satisfy start < band_a < band_b < stop with n_points >= 16"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// High-level device description used to synthesize a [`Device`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplexerSpec {
    /// Resonators per channel (even values avoid a symmetric degeneracy
    /// between the two terminations and are what hardware uses).
    pub resonators_per_channel: usize,
    /// Equiripple return-loss level of each channel filter, in dB.
    pub return_loss_db: f64,
    pub plan: FrequencyPlan,
    /// Seed for screw-sensitivity draws and calibration probes.
    pub seed: u64,
}

impl DuplexerSpec {
    /// Production-sized device: 8 resonators per channel, 30 screws.
    pub fn full() -> Self {
        DuplexerSpec {
            resonators_per_channel: 8,
            return_loss_db: 22.0,
            plan: FrequencyPlan::default_plan(),
            seed: 11,
        }
    }

    /// Desk-sized device: 4 resonators per channel, 14 screws.
    pub fn desk() -> Self {
        DuplexerSpec {
            resonators_per_channel: 4,
            return_loss_db: 22.0,
            plan: FrequencyPlan::default_plan(),
            seed: 12,
        }
    }

    pub fn n_screws(&self) -> usize {
        2 * (2 * self.resonators_per_channel - 1)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.resonators_per_channel < 2 {
            return Err(SimError::InvalidSpec(
                "resonators_per_channel: need at least 2 to form a duplexer".into(),
            ));
        }
        if self.resonators_per_channel > 16 {
            return Err(SimError::InvalidSpec("resonators_per_channel: more than 16 is not supported".into()));
        }
        if !(3.0..=40.0).contains(&self.return_loss_db) {
            return Err(SimError::InvalidSpec("return_loss_db must be in [3, 40]".into()));
        }
        self.plan.validate()
    }
}

/// One channel filter: n coupled resonators with junction-side and
/// antenna-side terminations, in the lowpass prototype domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Resonator count.
    pub n: usize,
    /// Symmetric n x n coupling matrix, row-major. Diagonal offsets come
    /// from synthesis refinement; screws add on top of this baseline.
    pub m: Vec<f64>,
    /// Termination on resonator 1 (junction side).
    pub r1: f64,
    /// Termination on resonator n (channel port side).
    pub rn: f64,
    /// Band center used by the lowpass mapping, GHz.
    pub f0_ghz: f64,
    /// Band width used by the lowpass mapping, GHz.
    pub bw_ghz: f64,
}

impl ChannelModel {
    /// Lowpass variable for a physical frequency:
    /// `lambda(f) = (f0/bw) * (f/f0 - f0/f)`.
    pub fn lambda(&self, f_ghz: f64) -> f64 {
        (self.f0_ghz / self.bw_ghz) * (f_ghz / self.f0_ghz - self.f0_ghz / f_ghz)
    }
}

/// Shunt LC resonator at the junction: susceptance
/// `b(f) = kappa * (f/fr - fr/f)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub kappa: f64,
    pub fr_ghz: f64,
}

impl Junction {
    pub fn susceptance(&self, f_ghz: f64) -> f64 {
        self.kappa * (f_ghz / self.fr_ghz - self.fr_ghz / f_ghz)
    }
}

/// Which coupling-matrix entry a screw perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScrewSite {
    /// Detunes resonator `i`: adds to `M[i][i]`.
    Resonator(usize),
    /// Perturbs the mainline coupling between resonators `i` and `i+1`.
    Coupling(usize),
}

/// Channel a screw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

/// One tuning screw. Turning it by `theta` turns adds
/// `sensitivity * theta` to the targeted coupling-matrix entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screw {
    pub channel: Channel,
    pub site: ScrewSite,
    /// Coupling units per turn.
    pub sensitivity: f64,
    /// Largest single-screw offset (turns) that keeps both passband areas
    /// below 50 dB-points when every other screw is golden.
    pub tolerance_turns: f64,
    /// Loss weight derived from sensitivity, in [1, 10].
    pub weight: f64,
}

/// Fully synthesized, calibrated duplexer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub spec: DuplexerSpec,
    pub channel_a: ChannelModel,
    pub channel_b: ChannelModel,
    pub junction: Junction,
    pub screws: Vec<Screw>,
    /// Screws are clamped to [-travel, travel] turns.
    pub travel_turns: f64,
    /// Calibrated randomization magnitude: uniform screw offsets in
    /// [-m, m] turns produce a median untuned passband area near the
    /// calibration target.
    pub default_magnitude_turns: f64,
}

impl Device {
    pub fn n_screws(&self) -> usize {
        self.screws.len()
    }

    pub fn n_points(&self) -> usize {
        self.spec.plan.n_points
    }

    /// Golden screw state: every screw at zero turns.
    pub fn golden_positions(&self) -> Vec<f64> {
        vec![0.0; self.screws.len()]
    }

    /// Applies screw offsets to both channel coupling matrices.
    /// Positions are clamped to the travel range first.
    pub fn perturbed_channels(&self, positions: &[f64]) -> (ChannelModel, ChannelModel) {
        assert_eq!(positions.len(), self.screws.len(), "positions/screws mismatch");
        let mut a = self.channel_a.clone();
        let mut b = self.channel_b.clone();
        for (screw, &theta) in self.screws.iter().zip(positions) {
            let theta = theta.clamp(-self.travel_turns, self.travel_turns);
            let d = screw.sensitivity * theta;
            let ch = match screw.channel {
                Channel::A => &mut a,
                Channel::B => &mut b,
            };
            let n = ch.n;
            match screw.site {
                ScrewSite::Resonator(i) => ch.m[i * n + i] += d,
                ScrewSite::Coupling(i) => {
                    ch.m[i * n + i + 1] += d;
                    ch.m[(i + 1) * n + i] += d;
                }
            }
        }
        (a, b)
    }

    /// Uniform random screw state in [-magnitude, magnitude] turns.
    pub fn random_positions<R: rand::Rng>(&self, magnitude: f64, rng: &mut R) -> Vec<f64> {
        let m = magnitude.min(self.travel_turns);
        (0..self.screws.len()).map(|_| rng.gen_range(-m..=m)).collect()
    }

    /// Per-screw weight vector for the banded training loss.
    pub fn weights(&self) -> Vec<f64> {
        self.screws.iter().map(|s| s.weight).collect()
    }

    /// Per-screw tolerance vector (turns).
    pub fn tolerances(&self) -> Vec<f64> {
        self.screws.iter().map(|s| s.tolerance_turns).collect()
    }
}

/// Result of a full 3-port sweep, in dB, clipped to [-120, 0.01].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepState {
    /// Reflection at the common port.
    pub s11_db: Vec<f64>,
    /// Transmission common -> high-band port (channel B).
    pub s21_db: Vec<f64>,
    /// Transmission common -> low-band port (channel A).
    pub s31_db: Vec<f64>,
}

impl SweepState {
    pub fn n_points(&self) -> usize {
        self.s11_db.len()
    }

    pub fn curves(&self) -> [&[f64]; 3] {
        [&self.s11_db, &self.s21_db, &self.s31_db]
    }
}

/// dB floor/ceiling applied to every sweep sample.
pub const DB_FLOOR: f64 = -120.0;
pub const DB_CEIL: f64 = 0.01;

pub(crate) fn to_db(mag_sq: f64) -> f64 {
    // 20*log10(|s|) == 10*log10(|s|^2)
    let db = 10.0 * mag_sq.max(1e-300).log10();
    db.clamp(DB_FLOOR, DB_CEIL)
}

/// Simulator-level failures.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("synthesis failed: worst in-band S11 {worst_db:.2} dB after refinement")]
    Synthesis { worst_db: f64 },
    #[error("singular system matrix at {freq_ghz:.6} GHz")]
    Singular { freq_ghz: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_band_ranges_have_expected_sizes() {
        let plan = FrequencyPlan::default_plan();
        let a = plan.band_a_range();
        let b = plan.band_b_range();
        assert_eq!(a.len(), 260);
        assert_eq!(b.len(), 260);
        // Every grid point in the range lies inside the band.
        assert!(plan.freq_at(a.start) >= plan.band_a.lo);
        assert!(plan.freq_at(a.end - 1) <= plan.band_a.hi);
        assert!(plan.freq_at(a.start - 1) < plan.band_a.lo);
        assert!(plan.freq_at(a.end) > plan.band_a.hi);
        assert!(plan.freq_at(b.start) >= plan.band_b.lo);
        assert!(plan.freq_at(b.end - 1) <= plan.band_b.hi);
    }

    #[test]
    fn screw_counts_follow_channel_size() {
        assert_eq!(DuplexerSpec::full().n_screws(), 30);
        assert_eq!(DuplexerSpec::desk().n_screws(), 14);
    }

    #[test]
    fn lambda_is_zero_at_center_and_odd_around_it() {
        let ch = ChannelModel {
            n: 2,
            m: vec![0.0; 4],
            r1: 1.0,
            rn: 1.0,
            f0_ghz: 2.0,
            bw_ghz: 0.1,
        };
        assert!(ch.lambda(2.0).abs() < 1e-12);
        // lambda(f0*x) = -lambda(f0/x)
        let up = ch.lambda(2.0 * 1.03);
        let dn = ch.lambda(2.0 / 1.03);
        assert!((up + dn).abs() < 1e-12);
    }

    #[test]
    fn perturbation_is_symmetric_and_clamped() {
        let spec = DuplexerSpec {
            resonators_per_channel: 2,
            ..DuplexerSpec::desk()
        };
        let ch = ChannelModel {
            n: 2,
            m: vec![0.0, 0.5, 0.5, 0.0],
            r1: 1.0,
            rn: 1.0,
            f0_ghz: 1.85,
            bw_ghz: 0.08,
        };
        let dev = Device {
            spec,
            channel_a: ch.clone(),
            channel_b: ch,
            junction: Junction { kappa: 1.0, fr_ghz: 2.0 },
            screws: vec![
                Screw {
                    channel: Channel::A,
                    site: ScrewSite::Coupling(0),
                    sensitivity: 0.1,
                    tolerance_turns: 0.5,
                    weight: 1.0,
                },
                Screw {
                    channel: Channel::B,
                    site: ScrewSite::Resonator(1),
                    sensitivity: 0.2,
                    tolerance_turns: 0.5,
                    weight: 1.0,
                },
            ],
            travel_turns: 3.0,
            default_magnitude_turns: 1.0,
        };
        let (a, b) = dev.perturbed_channels(&[1.0, 99.0]);
        assert_eq!(a.m[1], 0.6);
        assert_eq!(a.m[2], 0.6);
        // 99 turns clamps to 3.
        assert_eq!(b.m[3], 0.2 * 3.0);
    }
}
