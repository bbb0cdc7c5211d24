//! Percentile threshold labels.
//!
//! For an audit window of eight hours starting at `start_hour` (wrapping past
//! hour 24), the four targets are:
//!
//! * `t1`: hours in the window with more than five inactive minutes, clipped to `2..=8`
//! * `t2`: P75 of window inactive minutes times the sensitivity factor, floored at 5
//! * `t3`, `t4`: P90 of window fluctuation counts, floored at 1
//!
//! Percentiles interpolate linearly between order statistics at index `q(n-1)`.

use crate::error::{Error, Result};
use crate::eval::ks_two_sample;
use crate::ingest::{CellDay, HOURS};

pub const WINDOW: usize = 8;
pub const T1_MIN: u32 = 2;
pub const T1_MAX: u32 = 8;
pub const T2_FLOOR: f64 = 5.0;
pub const FLUCT_FLOOR: f64 = 1.0;
pub const INACTIVE_HOUR_MIN: f64 = 5.0;
pub const TARGET_NAMES: [&str; 4] = ["t1", "t2", "t3", "t4"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdLabels {
    pub t1: u32,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
}

impl ThresholdLabels {
    pub fn to_array(self) -> [f64; 4] {
        [f64::from(self.t1), self.t2, self.t3, self.t4]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        let t1 = a[0];
        if t1.fract() != 0.0 || !(f64::from(T1_MIN)..=f64::from(T1_MAX)).contains(&t1) {
            return Err(Error::Label(format!("t1 = {t1} is not an integer in 2..=8")));
        }
        Ok(ThresholdLabels {
            t1: t1 as u32,
            t2: a[1],
            t3: a[2],
            t4: a[3],
        })
    }
}

/// 0.5 for evening starts (hours 19..=24), 1.0 for morning starts (8..=12),
/// 1.25 otherwise.
pub fn sensitivity_factor(start_hour: usize) -> Result<f64> {
    match start_hour {
        19..=24 => Ok(0.5),
        8..=12 => Ok(1.0),
        1..=24 => Ok(1.25),
        _ => Err(Error::Domain(format!("start hour {start_hour} outside 1..=24"))),
    }
}

/// Linear-interpolation percentile of unsorted `values`, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// The eight hourly values starting at 1-based `start_hour`, wrapping mod 24.
pub fn window(values: &[f64; HOURS], start_hour: usize) -> [f64; WINDOW] {
    std::array::from_fn(|i| values[(start_hour - 1 + i) % HOURS])
}

pub fn derive_labels(inactive: &[f64; HOURS], fluct: &[f64; HOURS], start_hour: usize) -> Result<ThresholdLabels> {
    let s = sensitivity_factor(start_hour)?;
    let wi = window(inactive, start_hour);
    let wf = window(fluct, start_hour);
    let over = wi.iter().filter(|&&v| v > INACTIVE_HOUR_MIN).count() as u32;
    let p90 = percentile(&wf, 0.9).max(FLUCT_FLOOR);
    Ok(ThresholdLabels {
        t1: over.clamp(T1_MIN, T1_MAX),
        t2: (percentile(&wi, 0.75) * s).max(T2_FLOOR),
        t3: p90,
        t4: p90,
    })
}

pub fn labels_for_day(cd: &CellDay) -> [ThresholdLabels; HOURS] {
    let fluct = cd.fluct_f64();
    std::array::from_fn(|i| derive_labels(&cd.hourly_inactive, &fluct, i + 1).expect("hour in range"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KsTargetResult {
    pub target: &'static str,
    pub statistic: f64,
    pub p_value: f64,
    pub n_holdout: usize,
    pub n_rest: usize,
}

/// Deterministic 64-bit hash of a cell id under `seed` (FNV-1a, then a
/// splitmix finaliser).
pub fn cell_hash(cell_id: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in cell_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn in_holdout(cell_id: &str, fraction: f64, seed: u64) -> bool {
    let u = (cell_hash(cell_id, seed) >> 11) as f64 / (1u64 << 53) as f64;
    u < fraction
}

/// Compare label distributions between a seeded cell holdout and the rest.
///
/// Labels only depend on the cell-day itself, so the rest's labels are
/// recomputed without the holdout present and checked for equality before
/// the two-sample KS test runs per target.
pub fn ks_holdout_check(cell_days: &[CellDay], fraction: f64, seed: u64) -> Result<Vec<KsTargetResult>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let all: Vec<[ThresholdLabels; HOURS]> = crate::par::map(cell_days, labels_for_day);
    let mut hold: Vec<[f64; 4]> = Vec::new();
    let mut rest: Vec<[f64; 4]> = Vec::new();
    let mut rest_days = Vec::new();
    for (cd, labels) in cell_days.iter().zip(&all) {
        let side = if in_holdout(&cd.cell_id, fraction, seed) {
            &mut hold
        } else {
            rest_days.push(cd.clone());
            &mut rest
        };
        side.extend(labels.iter().map(|l| l.to_array()));
    }
    if hold.is_empty() || rest.is_empty() {
        return Err(Error::Config("holdout split left one side empty".into()));
    }
    let recomputed: Vec<[f64; 4]> = crate::par::map(&rest_days, labels_for_day)
        .into_iter()
        .flat_map(|l| l.map(|x| x.to_array()))
        .collect();
    if recomputed != rest {
        return Err(Error::State("labels changed when the holdout was removed".into()));
    }
    TARGET_NAMES
        .iter()
        .enumerate()
        .map(|(t, &name)| {
            let a: Vec<f64> = hold.iter().map(|l| l[t]).collect();
            let b: Vec<f64> = rest.iter().map(|l| l[t]).collect();
            let (statistic, p_value) = ks_two_sample(&a, &b)?;
            Ok(KsTargetResult {
                target: name,
                statistic,
                p_value,
                n_holdout: a.len(),
                n_rest: b.len(),
            })
        })
        .collect()
}
