//! Device persistence: canonical JSON serialization and fingerprinting.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Device, ScrewSite};

/// Errors raised while reading or writing device files.
#[derive(Debug, thiserror::Error)]
pub enum DeviceFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed device JSON at line {line}, column {column} (byte offset {byte}): {msg}")]
    Parse { line: usize, column: usize, byte: usize, msg: String },
    #[error("invalid device: {0}")]
    Invalid(String),
}

/// Canonical JSON form of a device: pretty-printed with a fixed field
/// order (struct order) and shortest round-trip float formatting, plus a
/// trailing newline. Loading and re-saving a device reproduces the file
/// byte for byte.
pub fn device_to_canonical_json(device: &Device) -> String {
    let mut s = serde_json::to_string_pretty(device).expect("device serializes");
    s.push('\n');
    s
}

/// SHA-256 of the canonical JSON, as raw bytes.
pub fn device_fingerprint_bytes(device: &Device) -> [u8; 32] {
    let json = device_to_canonical_json(device);
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.finalize().into()
}

/// SHA-256 of the canonical JSON, hex-encoded.
pub fn device_fingerprint(device: &Device) -> String {
    hex::encode(device_fingerprint_bytes(device))
}

pub fn save_device(device: &Device, path: &Path) -> Result<(), DeviceFileError> {
    std::fs::write(path, device_to_canonical_json(device))?;
    Ok(())
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line/column.
    let mut off = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1);
        }
        off += l.len() + 1;
    }
    off
}

fn validate(device: &Device) -> Result<(), DeviceFileError> {
    let inv = |msg: String| Err(DeviceFileError::Invalid(msg));
    if let Err(e) = device.spec.validate() {
        return inv(e.to_string());
    }
    let n = device.spec.resonators_per_channel;
    if device.screws.len() != device.spec.n_screws() {
        return inv(format!(
            "expected {} screws for {} resonators per channel, found {}",
            device.spec.n_screws(),
            n,
            device.screws.len()
        ));
    }
    for (label, ch) in [("channel_a", &device.channel_a), ("channel_b", &device.channel_b)] {
        if ch.n != n {
            return inv(format!("{label} has {} resonators, spec says {n}", ch.n));
        }
        if ch.m.len() != n * n {
            return inv(format!("{label} coupling matrix must be {n}x{n}"));
        }
        if !(ch.r1 > 0.0 && ch.rn > 0.0 && ch.bw_ghz > 0.0 && ch.f0_ghz > 0.0) {
            return inv(format!("{label} terminations and band must be positive"));
        }
    }
    for (i, s) in device.screws.iter().enumerate() {
        if !(s.sensitivity > 0.0) {
            return inv(format!("screw {i} has non-positive sensitivity"));
        }
        let site_ok = match s.site {
            ScrewSite::Resonator(r) => r < n,
            ScrewSite::Coupling(c) => c + 1 < n,
        };
        if !site_ok {
            return inv(format!("screw {i} targets an out-of-range site"));
        }
    }
    if !(device.travel_turns > 0.0) {
        return inv("travel must be positive".into());
    }
    if !(device.default_magnitude_turns > 0.0) {
        return inv("default magnitude must be positive".into());
    }
    Ok(())
}

pub fn load_device_from_str(text: &str) -> Result<Device, DeviceFileError> {
    let device: Device = serde_json::from_str(text).map_err(|e| DeviceFileError::Parse {
        line: e.line(),
        column: e.column(),
        byte: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    validate(&device)?;
    Ok(device)
}

pub fn load_device(path: &Path) -> Result<Device, DeviceFileError> {
    let text = std::fs::read_to_string(path)?;
    load_device_from_str(&text)
}
