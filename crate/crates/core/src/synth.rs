//! Seeded synthetic alarm generator and distribution audit.
//!
//! Every cell gets a vendor, a region and a persistent severity scale. Each
//! day draws a total inactive budget from a two-component log-normal mixture
//! (quiet days and "bad" days), splits it over a few alarms whose start hours
//! follow a diurnal profile with peaks at hours 9 and 24, and occasionally
//! adds a flapping burst of very short alarms within one hour. Alarms of one
//! cell never overlap and never share a start minute.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};

use crate::error::{Error, Result};
use crate::ingest::{
    aggregate_all, snapshot_file_name, AlarmRecord, CellDay, Region, Vendor, HOURS, SNAPSHOT_HEADER, TIMESTAMP_FORMAT,
};
use crate::labels::{labels_for_day, percentile_sorted, FLUCT_FLOOR};

/// Mean daily inactive minutes per region, `REG_A` through `REG_I`.
pub const REGION_MEAN_INACTIVE: [f64; 9] = [72.0, 58.0, 81.0, 113.0, 64.0, 52.0, 36.0, 90.0, 44.0];

const QUIET_ALARM_MINUTES: f64 = 15.0;

/// Relative start-hour weights for hour buckets 1..24.
pub const DIURNAL_WEIGHTS: [f64; HOURS] = [
    3.0, 2.5, 2.0, 1.5, 1.5, 2.0, 3.0, 5.0, 12.0, 4.0, 2.0, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 1.0, 1.5, 2.0, 3.0,
    5.0, 12.0,
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_cells: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub seed: u64,
    /// Shares of vendors X, Y, Z.
    pub vendor_mix: [f64; 3],
    /// Mean daily inactive minutes of vendors X, Y, Z.
    pub vendor_mean_inactive: [f64; 3],
    pub region_mean_inactive: [f64; 9],
    /// Weekend over weekday mean inactive ratio.
    pub weekend_multiplier: f64,
    /// Target share of fluctuation labels at the floor.
    pub fluct_floor_share: f64,
    pub diurnal_weights: [f64; HOURS],
    pub shape: Shape,
}

/// Internal mixture parameters, tuned once against the audit targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub bad_day_prob: f64,
    /// Mean of the bad-day budget factor; quiet days absorb the rest so the
    /// mixture has unit mean.
    pub bad_day_mean: f64,
    pub bad_sigma: f64,
    pub quiet_sigma: f64,
    pub cell_sigma: f64,
    /// Extra alarms per day beyond the first.
    pub extra_alarms: f64,
    /// Bursts per unit of non-floor label share.
    pub burst_scale: f64,
    pub max_daily_minutes: f64,
    /// Budget minutes per additional alarm on heavy days.
    pub minutes_per_alarm: f64,
    /// Longest single alarm outside the morning and midday hours.
    pub max_alarm_minutes: f64,
    /// A burst has between 2 and `1 + max_burst_extra` alarms.
    pub max_burst_extra: usize,
    /// Extra weekend budget factor that offsets minutes lost to hour and
    /// day capacity on heavy days.
    pub weekend_calibration: f64,
}

impl Default for Shape {
    fn default() -> Self {
        Shape {
            bad_day_prob: 0.2,
            bad_day_mean: 3.6,
            bad_sigma: 0.5,
            quiet_sigma: 1.0,
            cell_sigma: 0.4,
            extra_alarms: 1.0,
            burst_scale: 3.5,
            max_daily_minutes: 1200.0,
            minutes_per_alarm: 60.0,
            max_alarm_minutes: 240.0,
            max_burst_extra: 5,
            weekend_calibration: 1.15,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cells: 200,
            n_days: 10,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            seed: 42,
            vendor_mix: [0.4, 0.35, 0.25],
            vendor_mean_inactive: [85.0, 49.0, 60.0],
            region_mean_inactive: REGION_MEAN_INACTIVE,
            weekend_multiplier: 4.3,
            fluct_floor_share: 0.94,
            diurnal_weights: DIURNAL_WEIGHTS,
            shape: Shape::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_days == 0 {
            return Err(Error::Config("synthetic data needs at least one cell and one day".into()));
        }
        if self.n_cells > 9999 {
            return Err(Error::Config("cell ids have four digits; at most 9999 cells".into()));
        }
        let mix: f64 = self.vendor_mix.iter().sum();
        if (mix - 1.0).abs() > 1e-9 || self.vendor_mix.iter().any(|&v| v < 0.0) {
            return Err(Error::Config(format!("vendor mix must be non-negative and sum to 1, got {mix}")));
        }
        let positive = self
            .vendor_mean_inactive
            .iter()
            .chain(&self.region_mean_inactive)
            .chain(&self.diurnal_weights)
            .all(|&v| v > 0.0)
            && self.weekend_multiplier > 0.0;
        if !positive {
            return Err(Error::Config("synthetic knobs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.fluct_floor_share) {
            return Err(Error::Config("fluct floor share must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_days).map(|d| self.start_date + Duration::days(d as i64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub cell_id: String,
    pub vendor: Vendor,
    pub region: Region,
}

/// One alarm in absolute minutes from the first day's midnight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alarm {
    pub start: i64,
    pub duration: f64,
}

impl Alarm {
    fn end(&self) -> f64 {
        self.start as f64 + self.duration
    }
}

fn is_weekend(d: NaiveDate) -> bool {
    matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

struct CellGen<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl CellGen<'_> {
    fn spec(&mut self, index: usize) -> CellSpec {
        let vendor = Vendor::ALL[pick_weighted(&mut self.rng, &self.cfg.vendor_mix)];
        let region = Region::new(self.rng.random_range(0..Region::COUNT)).expect("region in range");
        CellSpec {
            cell_id: format!("N{vendor}_{:04}", index + 1),
            vendor,
            region,
        }
    }

    fn alarms(&mut self, spec: &CellSpec) -> Vec<Alarm> {
        let cfg = self.cfg;
        let sh = &cfg.shape;
        let region_avg: f64 = cfg.region_mean_inactive.iter().sum::<f64>() / 9.0;
        let cell_ln = LogNormal::new(-sh.cell_sigma * sh.cell_sigma / 2.0, sh.cell_sigma).expect("valid sigma");
        let cell_scale = cell_ln.sample(&mut self.rng);
        let base = cfg.vendor_mean_inactive[spec.vendor.index()] * cfg.region_mean_inactive[spec.region.index()] / region_avg
            * cell_scale;
        let w = cfg.weekend_multiplier;
        let weekday_mean = base * 7.0 / (5.0 + 2.0 * w);

        let quiet_mean = (1.0 - sh.bad_day_prob * sh.bad_day_mean) / (1.0 - sh.bad_day_prob);
        let bad = LogNormal::new(sh.bad_day_mean.ln() - sh.bad_sigma * sh.bad_sigma / 2.0, sh.bad_sigma).expect("valid");
        let quiet = LogNormal::new(quiet_mean.ln() - sh.quiet_sigma * sh.quiet_sigma / 2.0, sh.quiet_sigma).expect("valid");
        let extra = Poisson::new(sh.extra_alarms).expect("positive rate");
        let burst_prob = (sh.burst_scale * (1.0 - cfg.fluct_floor_share)).min(1.0);

        let mut out: Vec<Alarm> = Vec::new();
        for (day, date) in cfg.dates().into_iter().enumerate() {
            let expected = if is_weekend(date) {
                weekday_mean * w * sh.weekend_calibration
            } else {
                weekday_mean
            };
            let factor = if self.rng.random::<f64>() < sh.bad_day_prob {
                bad.sample(&mut self.rng)
            } else {
                quiet.sample(&mut self.rng)
            };
            let budget = (expected * factor).clamp(1.0, sh.max_daily_minutes);
            let n = (1 + extra.sample(&mut self.rng) as usize + (budget / sh.minutes_per_alarm) as usize).min(HOURS);
            let day0 = day as i64 * 1440;
            let mut day_alarms = self.place_day(day0, n, budget);
            let mut n = n;
            while day_alarms.1 > 1.0 && n < HOURS {
                n += 1;
                day_alarms = self.place_day(day0, n, budget);
            }
            let mut day_alarms = day_alarms.0;
            if self.rng.random::<f64>() < burst_prob {
                self.add_burst(day0, &mut day_alarms);
            }
            out.extend(day_alarms);
        }
        resolve_overlaps(out, cfg.n_days as i64 * 1440)
    }

    /// Start `n` alarms in distinct hours and split `budget` minutes over
    /// them. Each alarm is capped so it ends before the next one starts;
    /// morning alarms end by 11:00 and midday alarms stay short. Excess from
    /// capped alarms moves to the others; what cannot be placed is returned.
    fn place_day(&mut self, day0: i64, n: usize, budget: f64) -> (Vec<Alarm>, f64) {
        let mut weights = self.cfg.diurnal_weights;
        let mut hours = Vec::with_capacity(n);
        for _ in 0..n {
            let h = pick_weighted(&mut self.rng, &weights);
            weights[h] = 0.0;
            hours.push(h);
        }
        hours.sort_unstable();
        let starts: Vec<i64> = hours.iter().map(|&h| h as i64 * 60 + self.rng.random_range(0..60)).collect();
        let caps: Vec<f64> = (0..n)
            .map(|i| {
                let rule = match hours[i] {
                    0..=5 | 18..=23 => self.cfg.shape.max_alarm_minutes,
                    6..=10 => (660 - starts[i]) as f64,
                    _ => QUIET_ALARM_MINUTES,
                };
                let gap = starts.get(i + 1).map_or(f64::INFINITY, |&s| (s - starts[i] - 1) as f64);
                rule.min(gap).max(1.0)
            })
            .collect();
        let mut want: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>() + 0.2).collect();
        let total: f64 = want.iter().sum();
        want.iter_mut().for_each(|x| *x *= budget / total);
        let mut dur = vec![0.0; n];
        let mut remaining = budget;
        for _ in 0..4 {
            let mut excess = 0.0;
            for i in 0..n {
                let take = want[i].min(caps[i] - dur[i]);
                dur[i] += take;
                excess += want[i] - take;
            }
            remaining = excess;
            let open: f64 = (0..n).filter(|&i| caps[i] - dur[i] > 0.5).map(|i| caps[i] - dur[i]).sum();
            if excess < 0.5 || open <= 0.0 {
                break;
            }
            for i in 0..n {
                let room = caps[i] - dur[i];
                want[i] = if room > 0.5 { excess * room / open } else { 0.0 };
            }
        }
        let alarms = (0..n)
            .map(|i| Alarm {
                start: day0 + starts[i],
                duration: round1(dur[i].max(1.0).min(caps[i])),
            })
            .collect();
        (alarms, remaining)
    }

    /// A flapping burst: several sub-minute alarms at free minutes of one hour.
    fn add_burst(&mut self, day0: i64, alarms: &mut Vec<Alarm>) {
        let h = pick_weighted(&mut self.rng, &self.cfg.diurnal_weights) as i64;
        let busy = |m: i64, list: &[Alarm]| {
            list.iter().any(|a| (a.start - 1..=a.end().ceil() as i64).contains(&(day0 + m)))
        };
        let free: Vec<i64> = (h * 60..h * 60 + 60).filter(|&m| !busy(m, alarms)).collect();
        let k = (2 + self.rng.random_range(0..self.cfg.shape.max_burst_extra)).min(free.len() / 2);
        let mut chosen: BTreeSet<i64> = BTreeSet::new();
        let mut guard = 0;
        while chosen.len() < k && guard < 200 {
            guard += 1;
            let m = free[self.rng.random_range(0..free.len())];
            if !chosen.contains(&(m - 1)) && !chosen.contains(&(m + 1)) {
                chosen.insert(m);
            }
        }
        for m in chosen {
            alarms.push(Alarm {
                start: day0 + m,
                duration: round1(self.rng.random_range(0.2..0.9)),
            });
        }
    }
}

/// Sort by start, then push each alarm past its predecessor's end. Alarms
/// pushed beyond `horizon` are dropped.
fn resolve_overlaps(mut alarms: Vec<Alarm>, horizon: i64) -> Vec<Alarm> {
    alarms.sort_by(|a, b| a.start.cmp(&b.start).then(a.duration.total_cmp(&b.duration)));
    let mut out: Vec<Alarm> = Vec::with_capacity(alarms.len());
    for mut a in alarms {
        if let Some(prev) = out.last() {
            let free = prev.end().ceil() as i64 + 1;
            if a.start < free {
                a.start = free;
            }
        }
        if a.start < horizon {
            out.push(a);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellAlarms {
    pub spec: CellSpec,
    pub alarms: Vec<Alarm>,
}

/// Draw every cell's alarms. Cell `i` uses stream `i` of the seeded
/// generator, so output does not depend on scheduling.
pub fn generate_alarms(cfg: &SynthConfig) -> Result<Vec<CellAlarms>> {
    cfg.validate()?;
    Ok(crate::par::map_range(cfg.n_cells, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut g = CellGen { cfg, rng };
        let spec = g.spec(i);
        let alarms = g.alarms(&spec);
        CellAlarms { spec, alarms }
    }))
}

fn origin(cfg: &SynthConfig) -> NaiveDateTime {
    cfg.start_date.and_hms_opt(0, 0, 0).expect("midnight")
}

/// Final (full-duration) alarm records, as ingestion would reconstruct them.
pub fn final_records(cfg: &SynthConfig, cells: &[CellAlarms]) -> Vec<AlarmRecord> {
    let t0 = origin(cfg);
    let mut out = Vec::new();
    for c in cells {
        for a in &c.alarms {
            let start = t0 + Duration::minutes(a.start);
            let end_snapshot = (a.end() / 10.0).ceil() as i64 * 10;
            let snapshot_time = t0 + Duration::minutes(end_snapshot);
            out.push(AlarmRecord {
                snapshot_time,
                vendor: c.spec.vendor,
                region: c.spec.region,
                cell_id: c.spec.cell_id.clone(),
                alarm_start: start,
                duration_min: a.duration,
                source_file: snapshot_file_name(snapshot_time),
                raw_fields: Default::default(),
            });
        }
    }
    out
}

/// Generate cell-days directly through the ingest aggregator.
pub fn generate_cell_days(cfg: &SynthConfig) -> Result<Vec<CellDay>> {
    let cells = generate_alarms(cfg)?;
    Ok(aggregate_all(&final_records(cfg, &cells)).cell_days)
}

fn snapshot_row(id: usize, spec: &CellSpec, start: NaiveDateTime, elapsed: f64) -> Vec<String> {
    let cell = &spec.cell_id;
    let (source, custom, attrs) = match spec.vendor {
        Vendor::X => (String::new(), format!("CELL={cell};SEV=MAJ"), String::new()),
        Vendor::Y => (format!("BSSY12-{cell}-SITE7"), String::new(), String::new()),
        Vendor::Z => (String::new(), String::new(), format!("{{\"cell_name\":\"{cell}\",\"code\":41}}")),
    };
    vec![
        id.to_string(),
        spec.vendor.to_string(),
        spec.region.to_string(),
        source,
        custom,
        attrs,
        start.format(TIMESTAMP_FORMAT).to_string(),
        elapsed.to_string(),
    ]
}

/// Write one snapshot file every ten minutes. An alarm appears in every
/// snapshot while active with its elapsed duration, and in the first
/// snapshot at or after its end with the full duration. Returns the number
/// of files written.
pub fn write_snapshots(cfg: &SynthConfig, dir: &Path) -> Result<usize> {
    let cells = generate_alarms(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t0 = origin(cfg);
    let last_end = cells
        .iter()
        .flat_map(|c| c.alarms.iter().map(|a| a.end()))
        .fold(0.0f64, f64::max);
    let n_snap = ((last_end / 10.0).ceil() as i64).max(cfg.n_days as i64 * 144);
    // Bucket alarm rows by snapshot index.
    let mut rows: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n_snap as usize + 1];
    for (ci, c) in cells.iter().enumerate() {
        for (ai, a) in c.alarms.iter().enumerate() {
            let first = (a.start as f64 / 10.0).ceil() as i64;
            let last = (a.end() / 10.0).ceil() as i64;
            for s in first..=last {
                let elapsed = if s == last { a.duration } else { round1(s as f64 * 10.0 - a.start as f64) };
                rows[s as usize].push((ci, ai, elapsed));
            }
        }
    }
    for (s, entries) in rows.iter().enumerate() {
        let t = t0 + Duration::minutes(s as i64 * 10);
        let path = dir.join(snapshot_file_name(t));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(SNAPSHOT_HEADER).map_err(|e| Error::csv(&path, e))?;
        for (id, &(ci, ai, elapsed)) in entries.iter().enumerate() {
            let c = &cells[ci];
            let start = t0 + Duration::minutes(c.alarms[ai].start);
            w.write_record(snapshot_row(id + 1, &c.spec, start, elapsed))
                .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: percentile_sorted(&v, 0.5),
            p75: percentile_sorted(&v, 0.75),
            p90: percentile_sorted(&v, 0.9),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Audit {
    pub n_cell_days: usize,
    pub inactive: Summary,
    pub fluct: Summary,
    /// Share of cell-days with at most 15 inactive minutes.
    pub inactive_below_floor: f64,
    /// Share of cell-days with at most one fluctuation.
    pub fluct_below_floor: f64,
    pub hourly_mean_inactive: [f64; HOURS],
    pub hourly_mean_fluct: [f64; HOURS],
    /// Weekend over weekday mean daily inactive minutes; 0 when either is absent.
    pub weekend_ratio: f64,
    /// Share of derived t3/t4 labels sitting at the floor.
    pub fluct_label_floor_share: f64,
    /// The two hours (1-based) with the largest mean inactive minutes.
    pub top_hours: [usize; 2],
}

pub fn distribution_audit(cell_days: &[CellDay]) -> Audit {
    if cell_days.is_empty() {
        return Audit::default();
    }
    let n = cell_days.len() as f64;
    let inact: Vec<f64> = cell_days.iter().map(CellDay::total_inactive_min).collect();
    let fluct: Vec<f64> = cell_days.iter().map(|c| f64::from(c.total_fluct())).collect();
    let mut hi = [0.0; HOURS];
    let mut hf = [0.0; HOURS];
    for c in cell_days {
        for h in 0..HOURS {
            hi[h] += c.hourly_inactive[h] / n;
            hf[h] += f64::from(c.hourly_fluct[h]) / n;
        }
    }
    let (mut we, mut wd) = ((0.0, 0usize), (0.0, 0usize));
    for (c, t) in cell_days.iter().zip(&inact) {
        let side = if is_weekend(c.date) { &mut we } else { &mut wd };
        side.0 += t;
        side.1 += 1;
    }
    let weekend_ratio = if we.1 > 0 && wd.1 > 0 && wd.0 > 0.0 {
        (we.0 / we.1 as f64) / (wd.0 / wd.1 as f64)
    } else {
        0.0
    };
    let floor_counts = crate::par::map(cell_days, |c| {
        labels_for_day(c)
            .iter()
            .map(|l| usize::from(l.t3 == FLUCT_FLOOR) + usize::from(l.t4 == FLUCT_FLOOR))
            .sum::<usize>()
    });
    let floor_total: usize = floor_counts.iter().sum();
    let mut order: Vec<usize> = (0..HOURS).collect();
    order.sort_by(|&a, &b| hi[b].total_cmp(&hi[a]).then(a.cmp(&b)));
    Audit {
        n_cell_days: cell_days.len(),
        inactive: Summary::of(&inact),
        fluct: Summary::of(&fluct),
        inactive_below_floor: inact.iter().filter(|&&v| v <= 15.0).count() as f64 / n,
        fluct_below_floor: fluct.iter().filter(|&&v| v <= 1.0).count() as f64 / n,
        hourly_mean_inactive: hi,
        hourly_mean_fluct: hf,
        weekend_ratio,
        fluct_label_floor_share: floor_total as f64 / (n * HOURS as f64 * 2.0),
        top_hours: [order[0] + 1, order[1] + 1],
    }
}

impl Audit {
    /// `metric,inactive,fluct` rows followed by the hourly profile.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,inactive,fluct\n");
        let rows = [
            ("mean", self.inactive.mean, self.fluct.mean),
            ("median", self.inactive.median, self.fluct.median),
            ("p75", self.inactive.p75, self.fluct.p75),
            ("p90", self.inactive.p90, self.fluct.p90),
            ("max", self.inactive.max, self.fluct.max),
            ("below_floor_share", self.inactive_below_floor, self.fluct_below_floor),
        ];
        for (name, a, b) in rows {
            let _ = writeln!(s, "{name},{a:.6},{b:.6}");
        }
        let _ = writeln!(s, "n_cell_days,{},{}", self.n_cell_days, self.n_cell_days);
        let _ = writeln!(s, "weekend_ratio,{:.6},", self.weekend_ratio);
        let _ = writeln!(s, "fluct_label_floor_share,,{:.6}", self.fluct_label_floor_share);
        let _ = writeln!(s, "top_hours,{} {},", self.top_hours[0], self.top_hours[1]);
        for h in 0..HOURS {
            let _ = writeln!(s, "hour_{},{:.6},{:.6}", h + 1, self.hourly_mean_inactive[h], self.hourly_mean_fluct[h]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{dedup, parse_dir};

    fn small() -> SynthConfig {
        SynthConfig {
            n_cells: 12,
            n_days: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { n_cells: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { n_days: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { vendor_mix: [0.5, 0.5, 0.5], ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn alarms_do_not_overlap() {
        for c in generate_alarms(&small()).unwrap() {
            for w in c.alarms.windows(2) {
                assert!((w[0].end()) < w[1].start as f64);
            }
        }
    }

    #[test]
    fn deterministic_cell_days() {
        let a = generate_cell_days(&small()).unwrap();
        let b = generate_cell_days(&small()).unwrap();
        assert_eq!(a, b);
        for cd in &a {
            cd.validate().unwrap();
        }
        let other = generate_cell_days(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        crate::par::set_enabled(false);
        let seq = generate_cell_days(&small()).unwrap();
        crate::par::set_enabled(true);
        assert_eq!(seq, generate_cell_days(&small()).unwrap());
    }

    #[test]
    fn snapshots_reproduce_direct_cell_days() {
        let cfg = SynthConfig { n_cells: 5, n_days: 2, ..SynthConfig::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_snapshots(&cfg, d1.path()).unwrap();
        write_snapshots(&cfg, d2.path()).unwrap();
        let names: Vec<_> = std::fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        for n in names {
            assert_eq!(std::fs::read(d1.path().join(&n)).unwrap(), std::fs::read(d2.path().join(&n)).unwrap());
        }
        let parsed = parse_dir(d1.path()).unwrap();
        assert_eq!(parsed.skipped + parsed.unknown_vendor, 0);
        let via_ingest = aggregate_all(&dedup(&parsed.records)).cell_days;
        assert_eq!(via_ingest, generate_cell_days(&cfg).unwrap());
    }

    #[test]
    fn audit_of_zero_days() {
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let days = vec![CellDay::empty("NX_0001", d, Vendor::X, Region::new(0).unwrap()); 3];
        let a = distribution_audit(&days);
        assert_eq!(a.inactive, Summary::default());
        assert_eq!(a.fluct, Summary::default());
        assert_eq!(a.fluct_label_floor_share, 1.0);
        assert_eq!(distribution_audit(&[]), Audit::default());
    }

    #[test]
    fn audit_matches_bruteforce() {
        let days = generate_cell_days(&small()).unwrap();
        let a = distribution_audit(&days);
        let mut totals: Vec<f64> = days.iter().map(|c| c.hourly_inactive.iter().sum()).collect();
        totals.sort_by(f64::total_cmp);
        let n = totals.len();
        let pos = 0.9 * (n - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let p90 = totals[lo] + (pos - lo as f64) * (totals[hi] - totals[lo]);
        assert!((a.inactive.p90 - p90).abs() < 1e-9);
        assert!((a.inactive.max - totals[n - 1]).abs() < 1e-9);
        let h9: f64 = days.iter().map(|c| c.hourly_inactive[8]).sum::<f64>() / n as f64;
        assert!((a.hourly_mean_inactive[8] - h9).abs() < 1e-9);
        assert!(a.to_csv().starts_with("metric,inactive,fluct\n"));
    }
}
