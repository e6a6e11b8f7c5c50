//! Sweep-derived diagnostics: passband area, force vectors, reflection
//! peaks, and S21 shape-regression targets.

use serde::{Deserialize, Serialize};

use crate::sim::{Device, SweepState};

/// Return-loss threshold (dB) above which passband samples contribute to
/// the mismatch area.
pub const AREA_THRESHOLD_DB: f64 = -20.0;
/// Subranges per passband used by the force vector.
pub const SUBRANGES_PER_BAND: usize = 10;
/// Normalization headroom per sample when scaling forces to [0, 1]:
/// a sample can exceed the threshold by at most this many dB in practice.
pub const FORCE_FULL_SCALE_DB: f64 = 20.0;
/// Default peak prominence requirement, in dB.
pub const PEAK_MIN_PROMINENCE_DB: f64 = 3.0;
/// Maximum reflection peaks reported per curve.
pub const MAX_PEAKS_PER_CURVE: usize = 64;
/// Peak amplitudes are normalized by this many dB.
pub const PEAK_AMP_SCALE_DB: f64 = 80.0;

/// Mismatch area of one passband: sum over in-band samples of the dB
/// exceedance above the -20 dB return-loss threshold.
pub fn band_area(s11_db: &[f64], band: std::ops::Range<usize>) -> f64 {
    s11_db[band].iter().map(|&v| (v - AREA_THRESHOLD_DB).max(0.0)).sum()
}

/// Both passband areas `(area_a, area_b)` of a sweep.
pub fn passband_areas(device: &Device, sweep: &SweepState) -> (f64, f64) {
    let plan = &device.spec.plan;
    (
        band_area(&sweep.s11_db, plan.band_a_range()),
        band_area(&sweep.s11_db, plan.band_b_range()),
    )
}

/// Sum of both passband areas; the solver's scalar objective.
pub fn area_sum(device: &Device, sweep: &SweepState) -> f64 {
    let (a, b) = passband_areas(device, sweep);
    a + b
}

/// Splits `band` into [`SUBRANGES_PER_BAND`] contiguous subranges. When
/// the length is not divisible, the remainder is spread one extra sample
/// each over the leading subranges.
pub fn band_subranges(band: std::ops::Range<usize>) -> Vec<std::ops::Range<usize>> {
    let len = band.len();
    let base = len / SUBRANGES_PER_BAND;
    let extra = len % SUBRANGES_PER_BAND;
    let mut out = Vec::with_capacity(SUBRANGES_PER_BAND);
    let mut start = band.start;
    for i in 0..SUBRANGES_PER_BAND {
        let l = base + usize::from(i < extra);
        out.push(start..start + l);
        start += l;
    }
    out
}

/// Force vector: per-subrange mismatch areas of both passbands (band A
/// subranges first, then band B), each normalized to [0, 1] by the full
/// scale `FORCE_FULL_SCALE_DB * subrange_len`.
pub fn forces(device: &Device, sweep: &SweepState) -> Vec<f64> {
    let plan = &device.spec.plan;
    let mut out = Vec::with_capacity(2 * SUBRANGES_PER_BAND);
    for band in [plan.band_a_range(), plan.band_b_range()] {
        for sub in band_subranges(band) {
            let full_scale = FORCE_FULL_SCALE_DB * sub.len() as f64;
            let a = band_area(&sweep.s11_db, sub);
            out.push((a / full_scale).clamp(0.0, 1.0));
        }
    }
    out
}

/// A detected reflection peak (local minimum of a dB curve).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Sample index of the minimum (leftmost sample for plateaus).
    pub index: usize,
    /// Curve value at the peak, in dB.
    pub level_db: f64,
    /// Topographic prominence, in dB.
    pub prominence_db: f64,
}

impl Peak {
    /// Normalized (position, amplitude) pair fed to the actor: index over
    /// curve length in [0, 1], dB level over [`PEAK_AMP_SCALE_DB`] in
    /// [-1.5, 0].
    pub fn normalized(&self, n_points: usize) -> (f64, f64) {
        (self.index as f64 / n_points as f64, self.level_db / PEAK_AMP_SCALE_DB)
    }
}

/// Finds downward peaks of a dB curve: strict local minima (plateaus
/// count once, at their leftmost sample; curve endpoints never qualify)
/// with topographic prominence at least `min_prominence_db`. Peaks are
/// returned in index order, capped at [`MAX_PEAKS_PER_CURVE`] deepest.
pub fn find_peaks(curve: &[f64], min_prominence_db: f64) -> Vec<Peak> {
    let n = curve.len();
    if n < 3 {
        return Vec::new();
    }

    // Candidate minima: strictly lower than the previous distinct value
    // and the next distinct value. For a plateau, the leftmost sample is
    // the candidate; a plateau touching either endpoint is not a peak.
    let mut candidates: Vec<usize> = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if curve[i] < curve[i - 1] {
            // Scan the plateau of equal values starting at i.
            let mut j = i;
            while j + 1 < n && curve[j + 1] == curve[i] {
                j += 1;
            }
            if j + 1 < n && curve[j + 1] > curve[i] {
                candidates.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    // Prominence for downward peaks: on each side, walk until the curve
    // drops below the peak level; the barrier is the highest value seen
    // on that walk. Prominence = min(left barrier, right barrier) - level.
    let mut peaks: Vec<Peak> = candidates
        .into_iter()
        .filter_map(|idx| {
            let level = curve[idx];
            let mut left_barrier = f64::NEG_INFINITY;
            let mut k = idx;
            while k > 0 {
                k -= 1;
                if curve[k] < level {
                    break;
                }
                left_barrier = left_barrier.max(curve[k]);
            }
            let mut right_barrier = f64::NEG_INFINITY;
            let mut k = idx;
            while k + 1 < n {
                k += 1;
                if curve[k] < level {
                    break;
                }
                right_barrier = right_barrier.max(curve[k]);
            }
            let prominence = left_barrier.min(right_barrier) - level;
            (prominence >= min_prominence_db).then_some(Peak {
                index: idx,
                level_db: level,
                prominence_db: prominence,
            })
        })
        .collect();

    if peaks.len() > MAX_PEAKS_PER_CURVE {
        // Keep the deepest peaks, then restore index order.
        peaks.sort_by(|a, b| a.level_db.partial_cmp(&b.level_db).unwrap());
        peaks.truncate(MAX_PEAKS_PER_CURVE);
        peaks.sort_by_key(|p| p.index);
    }
    peaks
}

/// Index ranges of the four characteristic S21 regions, derived from the
/// passband placement: the in-band plateau (high band interior), the two
/// out-of-band drops flanking it, and the sloping low-band segment.
#[derive(Debug, Clone, PartialEq)]
pub struct S21Regions {
    pub plateau: std::ops::Range<usize>,
    pub left_drop: std::ops::Range<usize>,
    pub right_drop: std::ops::Range<usize>,
    pub sloping: std::ops::Range<usize>,
}

/// Samples flanking the high passband used for the drop regions.
pub const DROP_WIDTH: usize = 30;

pub fn s21_regions(device: &Device) -> S21Regions {
    let plan = &device.spec.plan;
    let b = plan.band_b_range();
    let a = plan.band_a_range();
    let inset = (b.len() / 10).max(2);
    S21Regions {
        plateau: b.start + inset..b.end - inset,
        left_drop: b.start.saturating_sub(DROP_WIDTH)..b.start,
        right_drop: b.end..(b.end + DROP_WIDTH).min(plan.n_points),
        sloping: a,
    }
}

/// Straight-line fits (slope, intercept) to the four S21 regions, with x
/// the sample index normalized by the curve length and y in dB. Region
/// order: plateau, left drop, right drop, sloping low band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    pub plateau: (f64, f64),
    pub left_drop: (f64, f64),
    pub right_drop: (f64, f64),
    pub sloping: (f64, f64),
}

impl ShapeCoefficients {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.plateau.0,
            self.plateau.1,
            self.left_drop.0,
            self.left_drop.1,
            self.right_drop.0,
            self.right_drop.1,
            self.sloping.0,
            self.sloping.1,
        ]
    }
}

/// Least-squares line fit over one region. x = index / n_points.
fn fit_line(curve: &[f64], region: std::ops::Range<usize>) -> (f64, f64) {
    let n_points = curve.len() as f64;
    let m = region.len() as f64;
    assert!(region.len() >= 2, "region must have at least 2 samples");
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in region {
        let x = i as f64 / n_points;
        let y = curve[i];
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = m * sxx - sx * sx;
    let slope = (m * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / m;
    (slope, intercept)
}

/// Fits the four-region S21 shape description of a sweep.
pub fn s21_shape(device: &Device, sweep: &SweepState) -> ShapeCoefficients {
    let r = s21_regions(device);
    let c = &sweep.s21_db;
    ShapeCoefficients {
        plateau: fit_line(c, r.plateau),
        left_drop: fit_line(c, r.left_drop),
        right_drop: fit_line(c, r.right_drop),
        sloping: fit_line(c, r.sloping),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn band_area_matches_hand_sum() {
        // Curve: -25, -18, -20, -15 over the band => exceedances 0,2,0,5.
        let s11 = vec![-25.0, -18.0, -20.0, -15.0];
        assert_relative_eq!(band_area(&s11, 0..4), 7.0);
        assert_relative_eq!(band_area(&s11, 1..3), 2.0);
    }

    #[test]
    fn subranges_partition_with_leading_remainder() {
        let subs = band_subranges(7..30); // 23 samples => 3,3,3,2,2,...
        assert_eq!(subs.len(), SUBRANGES_PER_BAND);
        assert_eq!(subs[0], 7..10);
        assert_eq!(subs[1], 10..13);
        assert_eq!(subs[2], 13..16);
        assert_eq!(subs[3], 16..18);
        assert_eq!(subs.last().unwrap().end, 30);
        let total: usize = subs.iter().map(|r| r.len()).sum();
        assert_eq!(total, 23);
    }

    #[test]
    fn forces_are_normalized_subarea_fractions() {
        // Build a synthetic sweep on a tiny plan via direct arithmetic:
        // all in-band samples sit 2 dB above threshold => each subarea is
        // 2 * sublen, i.e. 0.1 of full scale.
        let vals = vec![-18.0; 100];
        let subs = band_subranges(0..100);
        for sub in subs {
            let a = band_area(&vals, sub.clone());
            let f = a / (FORCE_FULL_SCALE_DB * sub.len() as f64);
            assert_relative_eq!(f, 0.1);
        }
    }

    #[test]
    fn peaks_brute_force_agreement_on_random_curves() {
        // Independent oracle: O(n^2) reference that checks every strict
        // minimum and computes prominence by full scans.
        fn reference(curve: &[f64], min_prom: f64) -> Vec<usize> {
            let n = curve.len();
            let mut out = Vec::new();
            for i in 1..n - 1 {
                // Leftmost sample of a run of equal values.
                if curve[i - 1] <= curve[i] {
                    continue;
                }
                let mut j = i;
                while j + 1 < n && curve[j + 1] == curve[i] {
                    j += 1;
                }
                if j + 1 >= n || curve[j + 1] <= curve[i] {
                    continue;
                }
                // Prominence by explicit scans.
                let level = curve[i];
                let mut lb = f64::NEG_INFINITY;
                for k in (0..i).rev() {
                    if curve[k] < level {
                        break;
                    }
                    lb = lb.max(curve[k]);
                }
                let mut rb = f64::NEG_INFINITY;
                for k in j + 1..n {
                    if curve[k] < level {
                        break;
                    }
                    rb = rb.max(curve[k]);
                }
                if lb.min(rb) - level >= min_prom {
                    out.push(i);
                }
            }
            out
        }

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for case in 0..50 {
            let n = 40 + (case % 7) * 33;
            let mut curve: Vec<f64> = (0..n).map(|_| -30.0 + rng.gen::<f64>() * 25.0).collect();
            // Inject plateaus.
            for _ in 0..5 {
                let i = rng.gen_range(1..n - 3);
                curve[i + 1] = curve[i];
                curve[i + 2] = curve[i];
            }
            let got: Vec<usize> = find_peaks(&curve, 3.0).iter().map(|p| p.index).collect();
            let mut want = reference(&curve, 3.0);
            if want.len() > MAX_PEAKS_PER_CURVE {
                // Mirror the production cap: keep the deepest, re-sort.
                want.sort_by(|&a, &b| curve[a].partial_cmp(&curve[b]).unwrap());
                want.truncate(MAX_PEAKS_PER_CURVE);
                want.sort();
            }
            assert_eq!(got, want, "case {case}");
        }
    }

    #[test]
    fn peak_endpoints_and_prominence_rules() {
        // V-shape: endpoint minima are not peaks.
        let v = vec![-30.0, -20.0, -10.0, -20.0, -30.0];
        assert!(find_peaks(&v, 1.0).is_empty());
        // Clear single dip.
        let dip = vec![0.0, -1.0, -10.0, -1.0, 0.0];
        let p = find_peaks(&dip, 3.0);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].index, 2);
        // Both walks climb past -1 to the 0 dB endpoints before the curve
        // ever drops below the peak level, so both barriers are 0 dB.
        assert_relative_eq!(p[0].prominence_db, 10.0);
        // Shallow dip below prominence threshold is rejected.
        let shallow = vec![0.0, -2.0, 0.0];
        assert!(find_peaks(&shallow, 3.0).is_empty());
    }

    #[test]
    fn plateau_peak_reports_leftmost_index() {
        let c = vec![0.0, -5.0, -5.0, -5.0, 0.0];
        let p = find_peaks(&c, 3.0);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].index, 1);
        assert_relative_eq!(p[0].prominence_db, 5.0);
    }

    #[test]
    fn peak_cap_keeps_the_deepest_in_index_order() {
        // 100 dips of increasing depth.
        let mut c = Vec::new();
        for k in 0..100 {
            c.push(0.0);
            c.push(-4.0 - k as f64 * 0.1);
        }
        c.push(0.0);
        let p = find_peaks(&c, 3.0);
        assert_eq!(p.len(), MAX_PEAKS_PER_CURVE);
        // Deepest 64 are the last 64 dips; order by index.
        assert!(p.windows(2).all(|w| w[0].index < w[1].index));
        assert_relative_eq!(p[0].level_db, -4.0 - 36.0 * 0.1);
    }

    #[test]
    fn line_fit_recovers_exact_lines() {
        let n = 200;
        let curve: Vec<f64> = (0..n).map(|i| 3.5 * (i as f64 / n as f64) - 7.0).collect();
        let (slope, intercept) = fit_line(&curve, 20..90);
        assert_relative_eq!(slope, 3.5, epsilon = 1e-9);
        assert_relative_eq!(intercept, -7.0, epsilon = 1e-9);
    }

    #[test]
    fn normalized_peak_features_scale_as_documented() {
        let p = Peak { index: 130, level_db: -40.0, prominence_db: 10.0 };
        let (x, a) = p.normalized(1300);
        assert_relative_eq!(x, 0.1);
        assert_relative_eq!(a, -0.5);
    }
}
