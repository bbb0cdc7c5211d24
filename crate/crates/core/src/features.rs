//! The 123-feature model input.
//!
//! Layout (indices are a frozen contract, see [`feature_names`]):
//!
//! | block    | count | contents |
//! |----------|-------|----------|
//! | temporal | 13    | day-of-week one-hot, weekend flag, start-hour and weekday cycles, start_hour/24 |
//! | hourly   | 48    | `ln(1+x)` of inactive minutes then fluctuations, hours 1..24 |
//! | blocks   | 27    | sum/mean/max per time block, plus morning/evening/night shares |
//! | peak     | 14    | argmax hour encodings, concentration shares, activity counts |
//! | lag      | 4     | previous-day and 3-day rolling totals |
//! | static   | 17    | vendor and region one-hot, trend level, interval and slope |
//!
//! The 48 hourly columns form the hourly slice; the other 75 are the context.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::ingest::{CellDay, Region, Vendor, DATE_FORMAT, HOURS};
use crate::labels::{labels_for_day, ThresholdLabels};

pub const N_FEATURES: usize = 123;
pub const N_CONTEXT: usize = 75;
pub const N_HOURLY: usize = 48;
pub const CATEGORY_COUNTS: [usize; 6] = [13, 48, 27, 14, 4, 17];
pub const CATEGORY_NAMES: [&str; 6] = ["temporal", "hourly", "blocks", "peak", "lag", "static"];

pub const HOURLY_START: usize = 13;
pub const HOURLY_END: usize = HOURLY_START + N_HOURLY;
const DOW_START: usize = 0;
const STATIC_START: usize = 106;

/// Time blocks as inclusive 1-based hour ranges.
pub const BLOCKS: [(&str, usize, usize); 4] = [
    ("night", 1, 6),
    ("morning", 7, 11),
    ("afternoon", 12, 17),
    ("evening", 18, 24),
];

pub const DOW_NAMES: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

pub fn feature_names() -> Vec<String> {
    let mut n: Vec<String> = Vec::with_capacity(N_FEATURES);
    n.extend(DOW_NAMES.iter().map(|d| format!("dow_{d}")));
    n.extend(
        ["is_weekend", "start_hour_sin", "start_hour_cos", "dow_sin", "dow_cos", "start_hour_frac"].map(String::from),
    );
    n.extend((1..=HOURS).map(|h| format!("log_inact_h{h}")));
    n.extend((1..=HOURS).map(|h| format!("log_fluct_h{h}")));
    for (b, _, _) in BLOCKS {
        for kind in ["inact", "fluct"] {
            for stat in ["sum", "mean", "max"] {
                n.push(format!("{kind}_{b}_{stat}"));
            }
        }
    }
    n.extend(["share_morning", "share_evening", "share_night"].map(String::from));
    for kind in ["inact", "fluct"] {
        n.extend(["peak_sin", "peak_cos", "peak_value"].map(|s| format!("{kind}_{s}")));
    }
    n.extend(
        [
            "inact_top1_share",
            "inact_top3_share",
            "fluct_top1_share",
            "fluct_top3_share",
            "inact_hours_over5",
            "fluct_hours_active",
            "inact_morning_peak",
            "fluct_morning_peak",
            "lag1_inact",
            "lag1_fluct",
            "roll3_inact",
            "roll3_fluct",
        ]
        .map(String::from),
    );
    n.extend(Vendor::ALL.iter().map(|v| format!("vendor_{v}")));
    n.extend(Region::all().map(|r| format!("region_{r}")));
    n.extend(["trend", "trend_lower", "trend_upper", "trend_width", "trend_slope"].map(String::from));
    n
}

/// Indices of the 75 non-hourly features, in vector order.
pub fn context_indices() -> Vec<usize> {
    (0..N_FEATURES).filter(|i| !(HOURLY_START..HOURLY_END).contains(i)).collect()
}

pub fn hourly_indices() -> Vec<usize> {
    (HOURLY_START..HOURLY_END).collect()
}

/// Columns left unscaled: day-of-week, vendor and region one-hots.
pub fn passthrough_indices() -> Vec<usize> {
    (DOW_START..DOW_START + 7).chain(STATIC_START..STATIC_START + 12).collect()
}

pub fn log_transform(x: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("log transform of negative value {x}")));
    }
    Ok(x.ln_1p())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendFeatures {
    pub trend: f64,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendModel {
    pub origin: NaiveDate,
    pub intercept: f64,
    pub slope: f64,
    pub resid_std: f64,
    pub fit_dates: Vec<NaiveDate>,
}

impl TrendModel {
    /// OLS on `(day index, total)`; with fewer than two points the line is
    /// flat at the single value with zero residual spread.
    pub fn fit(daily_totals: &BTreeMap<NaiveDate, f64>) -> Result<Self> {
        let (&origin, &first) = daily_totals
            .iter()
            .next()
            .ok_or_else(|| Error::Config("trend fit needs at least one date".into()))?;
        let fit_dates: Vec<NaiveDate> = daily_totals.keys().copied().collect();
        if daily_totals.len() < 2 {
            return Ok(TrendModel {
                origin,
                intercept: first,
                slope: 0.0,
                resid_std: 0.0,
                fit_dates,
            });
        }
        let pts: Vec<(f64, f64)> = daily_totals
            .iter()
            .map(|(d, &v)| ((*d - origin).num_days() as f64, v))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        Ok(TrendModel {
            origin,
            intercept,
            slope,
            resid_std: (ss / n).sqrt(),
            fit_dates,
        })
    }

    pub fn at(&self, date: NaiveDate) -> TrendFeatures {
        let x = (date - self.origin).num_days() as f64;
        let trend = self.intercept + self.slope * x;
        let half = 1.96 * self.resid_std;
        TrendFeatures {
            trend,
            lower: trend - half,
            upper: trend + half,
            width: 2.0 * half,
            slope: self.slope,
        }
    }
}

pub fn estimate_trend(daily_totals: &BTreeMap<NaiveDate, f64>, target: NaiveDate) -> Result<TrendFeatures> {
    Ok(TrendModel::fit(daily_totals)?.at(target))
}

/// Network mean of per-cell daily inactive minutes, per date in `dates`.
pub fn network_daily_means(cell_days: &[CellDay], dates: &BTreeSet<NaiveDate>) -> BTreeMap<NaiveDate, f64> {
    let mut acc: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    for cd in cell_days.iter().filter(|c| dates.contains(&c.date)) {
        let e = acc.entry(cd.date).or_default();
        e.0 += cd.total_inactive_min();
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub cell_id: String,
    pub date: NaiveDate,
    pub start_hour: u8,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn context(&self) -> Vec<f64> {
        context_indices().iter().map(|&i| self.values[i]).collect()
    }

    pub fn hourly(&self) -> &[f64] {
        &self.values[HOURLY_START..HOURLY_END]
    }
}

/// Prior-day totals of one cell, keyed by date.
#[derive(Clone, Debug, Default)]
pub struct History {
    totals: BTreeMap<NaiveDate, (f64, f64)>,
}

impl History {
    pub fn from_days<'a>(days: impl IntoIterator<Item = &'a CellDay>) -> Self {
        History {
            totals: days
                .into_iter()
                .map(|d| (d.date, (d.total_inactive_min(), f64::from(d.total_fluct()))))
                .collect(),
        }
    }

    fn total(&self, date: NaiveDate) -> (f64, f64) {
        self.totals.get(&date).copied().unwrap_or((0.0, 0.0))
    }
}

fn block_stats(v: &[f64; HOURS], lo: usize, hi: usize) -> (f64, f64, f64) {
    let s = &v[lo - 1..hi];
    let sum: f64 = s.iter().sum();
    let max = s.iter().copied().fold(0.0, f64::max);
    (sum, sum / s.len() as f64, max)
}

/// Smallest 1-based hour holding the maximum, or `None` for an all-zero day.
fn peak_hour(v: &[f64; HOURS]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for h in 0..HOURS {
        if v[h] > 0.0 && best.is_none_or(|b| v[h] > v[b]) {
            best = Some(h);
        }
    }
    best.map(|h| h + 1)
}

fn top_shares(v: &[f64; HOURS]) -> (f64, f64) {
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    (s[0] / total, (s[0] + s[1] + s[2]) / total)
}

fn cyc(value: f64, period: f64) -> (f64, f64) {
    let a = 2.0 * PI * value / period;
    (a.sin(), a.cos())
}

/// Features of one `(cell-day, start hour)` sample.
pub fn build_feature_vector(cd: &CellDay, start_hour: usize, history: &History, trend: &TrendFeatures) -> Result<FeatureVector> {
    if !(1..=HOURS).contains(&start_hour) {
        return Err(Error::Domain(format!("start hour {start_hour} outside 1..=24")));
    }
    cd.validate()?;
    let inact = cd.hourly_inactive;
    let fluct = cd.fluct_f64();
    let mut v = Vec::with_capacity(N_FEATURES);

    let dow = cd.date.weekday().num_days_from_monday() as usize;
    v.extend((0..7).map(|d| f64::from(u8::from(d == dow))));
    v.push(f64::from(u8::from(dow >= 5)));
    let (hs, hc) = cyc(start_hour as f64, 24.0);
    let (ds, dc) = cyc(dow as f64, 7.0);
    v.extend([hs, hc, ds, dc, start_hour as f64 / 24.0]);

    for x in inact.iter().chain(fluct.iter()) {
        v.push(log_transform(*x)?);
    }

    let total_inact: f64 = inact.iter().sum();
    let mut block_inact = [0.0; 4];
    for (bi, &(_, lo, hi)) in BLOCKS.iter().enumerate() {
        for series in [&inact, &fluct] {
            let (sum, mean, max) = block_stats(series, lo, hi);
            v.extend([sum.ln_1p(), mean.ln_1p(), max.ln_1p()]);
        }
        block_inact[bi] = block_stats(&inact, lo, hi).0;
    }
    let share = |x: f64| if total_inact > 0.0 { x / total_inact } else { 0.0 };
    v.extend([share(block_inact[1]), share(block_inact[3]), share(block_inact[0])]);

    let morning = BLOCKS[1].1..=BLOCKS[1].2;
    let mut morning_flags = [0.0; 2];
    for (k, series) in [&inact, &fluct].into_iter().enumerate() {
        match peak_hour(series) {
            Some(h) => {
                let (s, c) = cyc(h as f64, 24.0);
                v.extend([s, c, series[h - 1].ln_1p()]);
                morning_flags[k] = f64::from(u8::from(morning.contains(&h)));
            }
            None => v.extend([0.0, 0.0, 0.0]),
        }
    }
    let (i1, i3) = top_shares(&inact);
    let (f1, f3) = top_shares(&fluct);
    v.extend([i1, i3, f1, f3]);
    v.push(inact.iter().filter(|&&x| x > 5.0).count() as f64);
    v.push(fluct.iter().filter(|&&x| x >= 1.0).count() as f64);
    v.extend(morning_flags);

    let prev = history.total(cd.date - Duration::days(1));
    let mut roll = (0.0, 0.0);
    for k in 1..=3 {
        let t = history.total(cd.date - Duration::days(k));
        roll.0 += t.0 / 3.0;
        roll.1 += t.1 / 3.0;
    }
    v.extend([prev.0.ln_1p(), prev.1.ln_1p(), roll.0.ln_1p(), roll.1.ln_1p()]);

    v.extend(Vendor::ALL.iter().map(|&x| f64::from(u8::from(x == cd.vendor))));
    v.extend(Region::all().map(|r| f64::from(u8::from(r == cd.region))));
    v.extend([trend.trend, trend.lower, trend.upper, trend.width, trend.slope]);

    debug_assert_eq!(v.len(), N_FEATURES);
    Ok(FeatureVector {
        cell_id: cd.cell_id.clone(),
        date: cd.date,
        start_hour: start_hour as u8,
        values: v,
    })
}

pub fn expand_start_hours(cd: &CellDay, history: &History, trend: &TrendFeatures) -> Result<Vec<FeatureVector>> {
    (1..=HOURS).map(|h| build_feature_vector(cd, h, history, trend)).collect()
}

/// Expand every cell-day into 24 samples. The trend is fitted on
/// `trend_dates` only. Output follows the input cell-day order.
pub fn build_dataset(cell_days: &[CellDay], trend_dates: &BTreeSet<NaiveDate>) -> Result<(Vec<FeatureVector>, TrendModel)> {
    let trend = TrendModel::fit(&network_daily_means(cell_days, trend_dates))?;
    let mut by_cell: BTreeMap<&str, Vec<&CellDay>> = BTreeMap::new();
    for cd in cell_days {
        by_cell.entry(cd.cell_id.as_str()).or_default().push(cd);
    }
    let histories: BTreeMap<&str, History> = by_cell
        .into_iter()
        .map(|(c, days)| (c, History::from_days(days)))
        .collect();
    let per_day = crate::par::map(cell_days, |cd| {
        expand_start_hours(cd, &histories[cd.cell_id.as_str()], &trend.at(cd.date))
    });
    let mut out = Vec::with_capacity(cell_days.len() * HOURS);
    for r in per_day {
        out.extend(r?);
    }
    Ok((out, trend))
}

/// Split dates so the `n_test` latest distinct dates form the test set.
pub fn split_dates(dates: impl IntoIterator<Item = NaiveDate>, n_test: usize) -> Result<(BTreeSet<NaiveDate>, BTreeSet<NaiveDate>)> {
    let all: BTreeSet<NaiveDate> = dates.into_iter().collect();
    if n_test > 0 && all.len() < n_test + 1 {
        return Err(Error::Config(format!(
            "{} distinct dates cannot hold {n_test} test dates plus training data",
            all.len()
        )));
    }
    let cut = all.len() - n_test;
    let train = all.iter().take(cut).copied().collect();
    let test = all.iter().skip(cut).copied().collect();
    Ok((train, test))
}

pub fn split_by_date<T: Clone>(samples: &[T], date_of: impl Fn(&T) -> NaiveDate, n_test: usize) -> Result<(Vec<T>, Vec<T>)> {
    let (_, test) = split_dates(samples.iter().map(&date_of), n_test)?;
    let (te, tr): (Vec<T>, Vec<T>) = samples.iter().cloned().partition(|s| test.contains(&date_of(s)));
    Ok((tr, te))
}

/// Scaled, labelled samples split by date. The scaler and the trend only
/// ever see training dates.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub scaler: Scaler,
    pub trend: TrendModel,
    pub train_dates: BTreeSet<NaiveDate>,
    pub test_dates: BTreeSet<NaiveDate>,
}

pub fn prepare_samples(cell_days: &[CellDay], n_test: usize) -> Result<Prepared> {
    let (train_dates, test_dates) = split_dates(cell_days.iter().map(|c| c.date), n_test)?;
    let (vectors, trend) = build_dataset(cell_days, &train_dates)?;
    let labels = crate::par::map(cell_days, labels_for_day);
    let fit_rows: Vec<&[f64]> = vectors
        .iter()
        .filter(|v| train_dates.contains(&v.date))
        .map(|v| v.values.as_slice())
        .collect();
    let scaler = Scaler::fit(&fit_rows, &passthrough_indices())?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, v) in vectors.into_iter().enumerate() {
        let s = Sample {
            x: scaler.apply(&v.values)?,
            labels: Some(labels[i / HOURS][usize::from(v.start_hour) - 1]),
            cell_id: v.cell_id,
            date: v.date,
            start_hour: v.start_hour,
        };
        if test_dates.contains(&s.date) {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok(Prepared {
        train,
        test,
        scaler,
        trend,
        train_dates,
        test_dates,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub passthrough: Vec<bool>,
    pub fitted: bool,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Scaler {
    pub fn unfitted(n: usize) -> Self {
        Scaler {
            mean: vec![0.0; n],
            std: vec![1.0; n],
            passthrough: vec![false; n],
            fitted: false,
        }
    }

    /// Population mean and std per column; `passthrough` columns stay raw.
    pub fn fit(rows: &[&[f64]], passthrough: &[usize]) -> Result<Self> {
        let n = rows.first().ok_or_else(|| Error::Config("scaler fit on empty data".into()))?.len();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            if r.len() != n {
                return Err(Error::Shape("ragged rows in scaler fit".into()));
            }
            for (a, x) in mean.iter_mut().zip(r.iter()) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; n];
        for r in rows {
            for ((a, x), mu) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *a += (x - mu) * (x - mu);
            }
        }
        let std = var.iter().map(|v| (v / m).sqrt().max(STD_FLOOR)).collect();
        let mut pass = vec![false; n];
        for &i in passthrough {
            pass[i] = true;
        }
        Ok(Scaler {
            mean,
            std,
            passthrough: pass,
            fitted: true,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(Error::State("scaler applied before fitting".into()));
        }
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!("scaler expects {} columns, got {}", self.mean.len(), x.len())));
        }
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| if self.passthrough[i] { v } else { (v - self.mean[i]) / self.std[i] })
            .collect())
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(Error::State("scaler inverted before fitting".into()));
        }
        Ok(z.iter()
            .enumerate()
            .map(|(i, &v)| if self.passthrough[i] { v } else { v * self.std[i] + self.mean[i] })
            .collect())
    }
}

/// A scaled feature row with its key and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cell_id: String,
    pub date: NaiveDate,
    pub start_hour: u8,
    pub x: Vec<f64>,
    pub labels: Option<ThresholdLabels>,
}

impl Sample {
    pub fn labels(&self) -> Result<ThresholdLabels> {
        self.labels
            .ok_or_else(|| Error::Schema(format!("sample {} {} h{} has no labels", self.cell_id, self.date, self.start_hour)))
    }
}

pub fn feature_csv_header() -> Vec<String> {
    let mut h = feature_names();
    h.extend(["cell_id", "date", "start_hour", "t1", "t2", "t3", "t4"].map(String::from));
    h
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(feature_csv_header()).map_err(|e| Error::csv(path, e))?;
    for s in samples {
        let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        row.push(s.cell_id.clone());
        row.push(s.date.format(DATE_FORMAT).to_string());
        row.push(s.start_hour.to_string());
        match s.labels {
            Some(l) => row.extend(l.to_array().iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| Error::csv(path, e))?.iter().map(String::from).collect();
    if header != feature_csv_header() {
        return Err(Error::Schema(format!("{}: feature header does not match the 123-feature layout", path.display())));
    }
    let file = path.display().to_string();
    let perr = |line: usize, m: &str| Error::Parse {
        file: file.clone(),
        message: format!("row {line}: {m}"),
    };
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let x = (0..N_FEATURES)
            .map(|j| row[j].parse::<f64>().map_err(|_| perr(i + 1, "bad feature value")))
            .collect::<Result<Vec<f64>>>()?;
        let date = NaiveDate::parse_from_str(&row[N_FEATURES + 1], DATE_FORMAT).map_err(|_| perr(i + 1, "bad date"))?;
        let start_hour: u8 = row[N_FEATURES + 2].parse().map_err(|_| perr(i + 1, "bad start hour"))?;
        let lab: Vec<&str> = (N_FEATURES + 3..N_FEATURES + 7).map(|j| &row[j]).collect();
        let labels = if lab.iter().all(|s| s.is_empty()) {
            None
        } else {
            let mut a = [0.0; 4];
            for (k, s) in lab.iter().enumerate() {
                a[k] = s.parse().map_err(|_| perr(i + 1, "bad label"))?;
            }
            Some(ThresholdLabels::from_array(a)?)
        };
        out.push(Sample {
            cell_id: row[N_FEATURES].to_string(),
            date,
            start_hour,
            x,
            labels,
        });
    }
    Ok(out)
}

/// Plain-text record of the fitted scaler and trend.
pub fn manifest_text(scaler: &Scaler, trend: &TrendModel, scaler_dates: &BTreeSet<NaiveDate>) -> String {
    let fmt_dates = |ds: &mut dyn Iterator<Item = &NaiveDate>| ds.map(|d| d.format(DATE_FORMAT).to_string()).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let _ = writeln!(s, "scaler_fit_dates={}", fmt_dates(&mut scaler_dates.iter()));
    let _ = writeln!(s, "trend_fit_dates={}", fmt_dates(&mut trend.fit_dates.iter()));
    let _ = writeln!(
        s,
        "trend_origin={}\ntrend_intercept={}\ntrend_slope={}\ntrend_resid_std={}",
        trend.origin.format(DATE_FORMAT),
        trend.intercept,
        trend.slope,
        trend.resid_std
    );
    let _ = writeln!(s, "[scaler]\nname\tmean\tstd\tpassthrough");
    for (i, name) in feature_names().iter().enumerate() {
        let _ = writeln!(s, "{name}\t{}\t{}\t{}", scaler.mean[i], scaler.std[i], scaler.passthrough[i]);
    }
    s
}

/// Read `scaler_fit_dates` and `trend_fit_dates` back from a manifest.
pub fn manifest_fit_dates(text: &str) -> Result<(BTreeSet<NaiveDate>, BTreeSet<NaiveDate>)> {
    let get = |key: &str| -> Result<BTreeSet<NaiveDate>> {
        let line = text
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Schema(format!("manifest lacks {key}")))?;
        line.split(',')
            .filter(|s| !s.is_empty())
            .map(|d| NaiveDate::parse_from_str(d, DATE_FORMAT).map_err(|_| Error::Schema(format!("bad date {d:?} in {key}"))))
            .collect()
    };
    Ok((get("scaler_fit_dates")?, get("trend_fit_dates")?))
}
