//! The plain-text sweep format: `freq_ghz,s11_db,s21_db,s31_db`, one row
//! per frequency point, shortest round-trip float formatting.

use std::path::Path;

use dpx_core::sim::{Device, SweepState};

use crate::CliError;

pub fn write_sweep(path: &Path, device: &Device, sweep: &SweepState) -> Result<(), CliError> {
    let mut out = String::from("freq_ghz,s11_db,s21_db,s31_db\n");
    for i in 0..sweep.n_points() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            device.spec.plan.freq_at(i),
            sweep.s11_db[i],
            sweep.s21_db[i],
            sweep.s31_db[i]
        ));
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn read_sweep(path: &Path, device: &Device) -> Result<SweepState, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != "freq_ghz,s11_db,s21_db,s31_db" {
        return Err(CliError::Format(format!(
            "{}: expected header 'freq_ghz,s11_db,s21_db,s31_db', found {header:?}",
            path.display()
        )));
    }
    let mut state =
        SweepState { s11_db: Vec::new(), s21_db: Vec::new(), s31_db: Vec::new() };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CliError::Format(format!(
                "{}: line {}: expected 4 fields, found {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let mut vals = [0.0; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.trim().parse().map_err(|e| {
                CliError::Format(format!(
                    "{}: line {}: bad float {f:?}: {e}",
                    path.display(),
                    lineno + 2
                ))
            })?;
        }
        state.s11_db.push(vals[1]);
        state.s21_db.push(vals[2]);
        state.s31_db.push(vals[3]);
    }
    if state.n_points() != device.n_points() {
        return Err(CliError::Format(format!(
            "{}: {} rows but the device sweeps {} points",
            path.display(),
            state.n_points(),
            device.n_points()
        )));
    }
    Ok(state)
}
