//! Alarm snapshot parsing, deduplication and cell-day aggregation.
//!
//! Each snapshot file lists the alarms active at collection time. The same
//! alarm shows up in many consecutive snapshots with a growing duration, so
//! records are deduplicated on `(cell, alarm_start)` before aggregation.
//!
//! Hour buckets are 1-based: bucket `h` covers clock time `[h-1, h)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use log::warn;

use crate::error::{Error, Result};

pub const SNAPSHOT_HEADER: [&str; 8] = [
    "snapshot_id",
    "vendor",
    "region",
    "source_system_name",
    "alarmCustomAttr",
    "alarm_attributes",
    "alarm_start",
    "duration_min",
];

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";
pub const DATE_FORMAT: &str = "%Y-%m-%d";
pub const HOURS: usize = 24;
const MINUTES_PER_DAY: f64 = 1440.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Vendor {
    X,
    Y,
    Z,
}

impl Vendor {
    pub const ALL: [Vendor; 3] = [Vendor::X, Vendor::Y, Vendor::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Vendor::X => "X",
            Vendor::Y => "Y",
            Vendor::Z => "Z",
        }
    }
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Vendor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "X" => Ok(Vendor::X),
            "Y" => Ok(Vendor::Y),
            "Z" => Ok(Vendor::Z),
            other => Err(Error::Domain(format!("unknown vendor {other:?}"))),
        }
    }
}

/// The nine regions `REG_A` through `REG_I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Region(u8);

impl Region {
    pub const COUNT: usize = 9;

    pub fn new(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(Region(index as u8))
        } else {
            Err(Error::Domain(format!("region index {index} out of range")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Region> {
        (0..Self::COUNT as u8).map(Region)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "REG_{}", (b'A' + self.0) as char)
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Domain(format!("unknown region {s:?}"));
        let letter = s.strip_prefix("REG_").ok_or_else(bad)?;
        let b = letter.as_bytes();
        if b.len() != 1 || !(b'A'..=b'I').contains(&b[0]) {
            return Err(bad());
        }
        Ok(Region(b[0] - b'A'))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlarmRecord {
    pub snapshot_time: NaiveDateTime,
    pub vendor: Vendor,
    pub region: Region,
    pub cell_id: String,
    pub alarm_start: NaiveDateTime,
    pub duration_min: f64,
    /// File name the record was read from, used as the last dedup tie-break.
    pub source_file: String,
    pub raw_fields: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellDay {
    pub cell_id: String,
    pub date: NaiveDate,
    pub vendor: Vendor,
    pub region: Region,
    /// Index 0 holds hour bucket 1.
    pub hourly_inactive: [f64; HOURS],
    pub hourly_fluct: [u32; HOURS],
}

impl CellDay {
    pub fn empty(cell_id: impl Into<String>, date: NaiveDate, vendor: Vendor, region: Region) -> Self {
        CellDay {
            cell_id: cell_id.into(),
            date,
            vendor,
            region,
            hourly_inactive: [0.0; HOURS],
            hourly_fluct: [0; HOURS],
        }
    }

    pub fn total_inactive_min(&self) -> f64 {
        self.hourly_inactive.iter().sum()
    }

    pub fn total_fluct(&self) -> u32 {
        self.hourly_fluct.iter().sum()
    }

    pub fn fluct_f64(&self) -> [f64; HOURS] {
        self.hourly_fluct.map(f64::from)
    }

    pub fn validate(&self) -> Result<()> {
        for (h, &v) in self.hourly_inactive.iter().enumerate() {
            if !(0.0..=60.0 + 1e-9).contains(&v) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "cell {} {}: hour {} inactive {v} outside [0, 60]",
                    self.cell_id,
                    self.date,
                    h + 1
                )));
            }
        }
        if self.cell_id.is_empty() {
            return Err(Error::Domain("empty cell id".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotParse {
    pub records: Vec<AlarmRecord>,
    /// Rows dropped for malformed mandatory fields or failed cell extraction.
    pub skipped: usize,
    /// Rows dropped for an unknown vendor code.
    pub unknown_vendor: usize,
}

/// Parse the `YYYYMMDD_HHMM` token of an `alarms_YYYYMMDD_HHMM.csv` file name.
pub fn snapshot_time_from_name(name: &str) -> Result<NaiveDateTime> {
    let bad = || Error::Parse {
        file: name.to_string(),
        message: "file name lacks an alarms_YYYYMMDD_HHMM.csv timestamp".into(),
    };
    let token = name
        .strip_prefix("alarms_")
        .and_then(|s| s.strip_suffix(".csv"))
        .ok_or_else(bad)?;
    if token.len() != 13 {
        return Err(bad());
    }
    NaiveDateTime::parse_from_str(token, "%Y%m%d_%H%M").map_err(|_| bad())
}

pub fn snapshot_file_name(t: NaiveDateTime) -> String {
    format!("alarms_{}.csv", t.format("%Y%m%d_%H%M"))
}

pub fn parse_snapshot(path: &Path) -> Result<SnapshotParse> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            message: "not a file path".into(),
        })?;
    let snapshot_time = snapshot_time_from_name(name)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let found: Vec<&str> = headers.iter().collect();
    if found != SNAPSHOT_HEADER {
        return Err(Error::Parse {
            file: name.to_string(),
            message: format!("unexpected header {found:?}"),
        });
    }

    let mut out = SnapshotParse::default();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                out.skipped += 1;
                continue;
            }
        };
        if row.len() != SNAPSHOT_HEADER.len() {
            out.skipped += 1;
            continue;
        }
        let raw: BTreeMap<String, String> = SNAPSHOT_HEADER
            .iter()
            .zip(row.iter())
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let vendor = match raw["vendor"].parse::<Vendor>() {
            Ok(v) => v,
            Err(_) => {
                out.unknown_vendor += 1;
                warn!("{name}: unknown vendor {:?}", raw["vendor"]);
                continue;
            }
        };
        match parse_row(vendor, snapshot_time, name, raw) {
            Some(rec) => out.records.push(rec),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn parse_row(
    vendor: Vendor,
    snapshot_time: NaiveDateTime,
    file: &str,
    raw: BTreeMap<String, String>,
) -> Option<AlarmRecord> {
    let region = raw["region"].parse::<Region>().ok()?;
    let alarm_start = NaiveDateTime::parse_from_str(raw["alarm_start"].trim(), TIMESTAMP_FORMAT).ok()?;
    let duration_min: f64 = raw["duration_min"].trim().parse().ok()?;
    if !duration_min.is_finite() || duration_min < 0.0 || alarm_start > snapshot_time {
        return None;
    }
    let cell_id = extract_cell_name(vendor, &raw).ok()?;
    Some(AlarmRecord {
        snapshot_time,
        vendor,
        region,
        cell_id,
        alarm_start,
        duration_min,
        source_file: file.to_string(),
        raw_fields: raw,
    })
}

/// Parse every `alarms_*.csv` file in `dir`, in file-name order.
pub fn parse_dir(dir: &Path) -> Result<SnapshotParse> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("alarms_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    let parsed = crate::par::map(&paths, |p| parse_snapshot(p));
    let mut out = SnapshotParse::default();
    for p in parsed {
        let p = p?;
        out.records.extend(p.records);
        out.skipped += p.skipped;
        out.unknown_vendor += p.unknown_vendor;
    }
    Ok(out)
}

/// Recover the cell identifier from the vendor's source column.
pub fn extract_cell_name(vendor: Vendor, raw: &BTreeMap<String, String>) -> Result<String> {
    let column = match vendor {
        Vendor::X => "alarmCustomAttr",
        Vendor::Y => "source_system_name",
        Vendor::Z => "alarm_attributes",
    };
    let field = raw
        .get(column)
        .ok_or_else(|| Error::Domain(format!("vendor {vendor}: missing column {column}")))?;
    let cell = match vendor {
        Vendor::X => key_value_lookup(field, "CELL"),
        Vendor::Y => fixed_position(field),
        Vendor::Z => brace_lookup(field, "cell_name"),
    };
    match cell {
        Some(c) if !c.is_empty() => Ok(c),
        _ => Err(Error::Domain(format!("vendor {vendor}: no cell name in {field:?}"))),
    }
}

/// `KEY=value;KEY=value` grammar.
fn key_value_lookup(field: &str, key: &str) -> Option<String> {
    field.split(';').find_map(|part| {
        let (k, v) = part.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

/// Characters 7..14 (0-based, end-exclusive), trimmed.
fn fixed_position(field: &str) -> Option<String> {
    let chars: Vec<char> = field.chars().collect();
    if chars.len() < 14 {
        return None;
    }
    Some(chars[7..14].iter().collect::<String>().trim().to_string())
}

/// `{"key":"value","other":41}` grammar; quotes around keys and values are optional.
fn brace_lookup(field: &str, key: &str) -> Option<String> {
    let inner = field.trim().strip_prefix('{')?.strip_suffix('}')?;
    inner.split(',').find_map(|part| {
        let (k, v) = part.split_once(':')?;
        let unquote = |s: &str| s.trim().trim_matches('"').trim().to_string();
        (unquote(k) == key).then(|| unquote(v))
    })
}

/// Keep one record per `(cell_id, alarm_start)`: the longest duration, then
/// the latest snapshot, then the smallest source file name. Output is sorted
/// by `(cell_id, alarm_start)`.
pub fn dedup(records: &[AlarmRecord]) -> Vec<AlarmRecord> {
    let mut best: BTreeMap<(&str, NaiveDateTime), &AlarmRecord> = BTreeMap::new();
    for r in records {
        best.entry((r.cell_id.as_str(), r.alarm_start))
            .and_modify(|cur| {
                if beats(r, cur) {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    best.into_values().cloned().collect()
}

fn beats(a: &AlarmRecord, b: &AlarmRecord) -> bool {
    a.duration_min
        .total_cmp(&b.duration_min)
        .then(a.snapshot_time.cmp(&b.snapshot_time))
        .then(b.source_file.cmp(&a.source_file))
        .is_gt()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregation {
    /// Sorted by `(cell_id, date)`.
    pub cell_days: Vec<CellDay>,
    /// Minutes past midnight with no following observed date.
    pub dropped_minutes: f64,
    pub dropped_alarms: usize,
}

fn minute_of_day(t: NaiveDateTime) -> f64 {
    f64::from(t.hour() * 60 + t.minute())
}

/// Aggregate the cell-days of one date. Alarms from the previous date that
/// run past midnight contribute their remainder here.
pub fn aggregate_cell_days(records: &[AlarmRecord], date: NaiveDate) -> Vec<CellDay> {
    let prev = date - Duration::days(1);
    let mut per_cell: BTreeMap<&str, (Vendor, Region, Vec<(f64, f64)>, [u32; HOURS])> = BTreeMap::new();
    for r in records {
        let start_date = r.alarm_start.date();
        let interval = if start_date == date {
            let s = minute_of_day(r.alarm_start);
            Some((s, (s + r.duration_min).min(MINUTES_PER_DAY)))
        } else if start_date == prev {
            let end = minute_of_day(r.alarm_start) + r.duration_min - MINUTES_PER_DAY;
            (end > 0.0).then(|| (0.0, end.min(MINUTES_PER_DAY)))
        } else {
            None
        };
        let Some(interval) = interval else { continue };
        let entry = per_cell
            .entry(r.cell_id.as_str())
            .or_insert_with(|| (r.vendor, r.region, Vec::new(), [0; HOURS]));
        entry.2.push(interval);
        if start_date == date {
            entry.3[r.alarm_start.hour() as usize] += 1;
        }
    }
    per_cell
        .into_iter()
        .map(|(cell, (vendor, region, intervals, fluct))| {
            let mut cd = CellDay::empty(cell, date, vendor, region);
            cd.hourly_inactive = bucket_union(intervals);
            cd.hourly_fluct = fluct;
            cd
        })
        .collect()
}

/// Minutes of each hour bucket covered by the union of `intervals`.
fn bucket_union(mut intervals: Vec<(f64, f64)>) -> [f64; HOURS] {
    intervals.retain(|&(s, e)| e > s);
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (s, e) in intervals {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let mut out = [0.0; HOURS];
    for (s, e) in merged {
        let first = (s / 60.0).floor() as usize;
        let last = ((e / 60.0).ceil() as usize).min(HOURS);
        for (h, slot) in out.iter_mut().enumerate().take(last).skip(first) {
            let lo = s.max(h as f64 * 60.0);
            let hi = e.min((h + 1) as f64 * 60.0);
            if hi > lo {
                *slot += hi - lo;
            }
        }
    }
    out
}

/// Aggregate every date that has at least one alarm start. Spillover past
/// the last observed date is dropped with a warning.
pub fn aggregate_all(records: &[AlarmRecord]) -> Aggregation {
    let dates: BTreeSet<NaiveDate> = records.iter().map(|r| r.alarm_start.date()).collect();
    let mut by_date: BTreeMap<NaiveDate, Vec<AlarmRecord>> = BTreeMap::new();
    let mut out = Aggregation::default();
    for r in records {
        let d = r.alarm_start.date();
        by_date.entry(d).or_default().push(r.clone());
        let spill = minute_of_day(r.alarm_start) + r.duration_min - MINUTES_PER_DAY;
        if spill > 0.0 {
            let next = d + Duration::days(1);
            if dates.contains(&next) {
                by_date.entry(next).or_default().push(r.clone());
            } else {
                out.dropped_minutes += spill;
                out.dropped_alarms += 1;
            }
        }
    }
    if out.dropped_alarms > 0 {
        warn!(
            "{} alarm(s) run past the last observed date; {:.1} minutes dropped",
            out.dropped_alarms, out.dropped_minutes
        );
    }
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    let per_date = crate::par::map(&dates, |d| aggregate_cell_days(&by_date[d], *d));
    out.cell_days = per_date.into_iter().flatten().collect();
    out.cell_days
        .sort_by(|a, b| a.cell_id.cmp(&b.cell_id).then(a.date.cmp(&b.date)));
    out
}

pub fn cell_day_header() -> Vec<String> {
    let mut h: Vec<String> = ["cell_id", "date", "vendor", "region"].map(String::from).to_vec();
    h.extend((1..=HOURS).map(|i| format!("inact_h{i}")));
    h.extend((1..=HOURS).map(|i| format!("fluct_h{i}")));
    h
}

pub fn write_cell_days(path: &Path, days: &[CellDay]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(cell_day_header()).map_err(|e| Error::csv(path, e))?;
    for d in days {
        let mut row = vec![
            d.cell_id.clone(),
            d.date.format(DATE_FORMAT).to_string(),
            d.vendor.to_string(),
            d.region.to_string(),
        ];
        row.extend(d.hourly_inactive.iter().map(|v| v.to_string()));
        row.extend(d.hourly_fluct.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cell_days(path: &Path) -> Result<Vec<CellDay>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(String::from)
        .collect();
    if header != cell_day_header() {
        return Err(Error::Schema(format!("{}: unexpected cell-day header", path.display())));
    }
    let file = path.display().to_string();
    let perr = |line: usize, m: String| Error::Parse {
        file: file.clone(),
        message: format!("row {line}: {m}"),
    };
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let date = NaiveDate::parse_from_str(&row[1], DATE_FORMAT).map_err(|e| perr(i + 1, e.to_string()))?;
        let vendor: Vendor = row[2].parse().map_err(|e: Error| perr(i + 1, e.to_string()))?;
        let region: Region = row[3].parse().map_err(|e: Error| perr(i + 1, e.to_string()))?;
        let mut cd = CellDay::empty(&row[0], date, vendor, region);
        for h in 0..HOURS {
            cd.hourly_inactive[h] = row[4 + h].parse().map_err(|_| perr(i + 1, format!("bad inact_h{}", h + 1)))?;
            cd.hourly_fluct[h] = row[4 + HOURS + h]
                .parse()
                .map_err(|_| perr(i + 1, format!("bad fluct_h{}", h + 1)))?;
        }
        cd.validate().map_err(|e| perr(i + 1, e.to_string()))?;
        out.push(cd);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).unwrap()
    }

    fn rec(cell: &str, start: &str, dur: f64, snap: &str, file: &str) -> AlarmRecord {
        AlarmRecord {
            snapshot_time: ts(snap),
            vendor: Vendor::X,
            region: Region::new(0).unwrap(),
            cell_id: cell.into(),
            alarm_start: ts(start),
            duration_min: dur,
            source_file: file.into(),
            raw_fields: BTreeMap::new(),
        }
    }

    fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn vendor_grammars() {
        let x = fields(&[("alarmCustomAttr", "CELL=NX_1042;SEV=MAJ")]);
        assert_eq!(extract_cell_name(Vendor::X, &x).unwrap(), "NX_1042");
        let y = fields(&[("source_system_name", "BSSY12-NY_2210-SITE7")]);
        assert_eq!(extract_cell_name(Vendor::Y, &y).unwrap(), "NY_2210");
        let z = fields(&[("alarm_attributes", r#"{"cell_name":"NZ_0007","code":41}"#)]);
        assert_eq!(extract_cell_name(Vendor::Z, &z).unwrap(), "NZ_0007");
        assert!(extract_cell_name(Vendor::X, &fields(&[("alarmCustomAttr", "SEV=MAJ")])).is_err());
        assert!(extract_cell_name(Vendor::Y, &fields(&[("source_system_name", "short")])).is_err());
        assert!(extract_cell_name(Vendor::Z, &BTreeMap::new()).is_err());
    }

    #[test]
    fn region_roundtrip() {
        for r in Region::all() {
            assert_eq!(r.to_string().parse::<Region>().unwrap(), r);
        }
        assert!("REG_J".parse::<Region>().is_err());
    }

    #[test]
    fn filename_timestamp() {
        let t = snapshot_time_from_name("alarms_20240105_0910.csv").unwrap();
        assert_eq!(t, ts("2024-01-05 09:10"));
        assert!(snapshot_time_from_name("alarms_2024015_0910.csv").is_err());
        assert!(snapshot_time_from_name("dump.csv").is_err());
        assert_eq!(snapshot_file_name(t), "alarms_20240105_0910.csv");
    }

    fn write_file(dir: &Path, name: &str, rows: &[&str]) -> PathBuf {
        let p = dir.join(name);
        let mut s = SNAPSHOT_HEADER.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        std::fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn parse_rows_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "alarms_20240105_0910.csv",
            &[
                "1,X,REG_A,,CELL=NX_0001,,2024-01-05 09:00,10",
                "2,Y,REG_B,BSSY12-NY_0002-SITE7,,,2024-01-05 08:50,20",
                "3,Z,REG_C,,,\"{\"\"cell_name\"\":\"\"NZ_0003\"\"}\",2024-01-05 09:05,5",
                "4,X,REG_A,,CELL=NX_0004,,2024-01-05 09:00,abc",
                "5,Q,REG_A,,CELL=NX_0005,,2024-01-05 09:00,3",
            ],
        );
        let out = parse_snapshot(&p).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.skipped, 1);
        assert_eq!(out.unknown_vendor, 1);
        assert!(out.records.iter().all(|r| r.snapshot_time == ts("2024-01-05 09:10")));
        assert_eq!(out.records[2].cell_id, "NZ_0003");

        let empty = write_file(dir.path(), "alarms_20240105_0920.csv", &[]);
        assert!(parse_snapshot(&empty).unwrap().records.is_empty());
        let bad = write_file(dir.path(), "alarms_x.csv", &[]);
        assert!(matches!(parse_snapshot(&bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn dedup_keeps_longest_then_latest() {
        let a = rec("c", "2024-01-01 09:00", 5.0, "2024-01-01 09:05", "b.csv");
        let b = rec("c", "2024-01-01 09:00", 12.0, "2024-01-01 09:12", "b.csv");
        assert_eq!(dedup(&[a.clone(), b.clone()]), vec![b.clone()]);
        assert_eq!(dedup(std::slice::from_ref(&a)), vec![a]);
        let c = rec("c", "2024-01-01 09:00", 12.0, "2024-01-01 09:20", "z.csv");
        assert_eq!(dedup(&[b.clone(), c.clone()]), vec![c.clone()]);
        let d = rec("c", "2024-01-01 09:00", 12.0, "2024-01-01 09:20", "a.csv");
        assert_eq!(dedup(&[c, d.clone()]), vec![d]);
    }

    #[test]
    fn aggregation_buckets() {
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let one = aggregate_cell_days(&[rec("c", "2024-01-01 09:20", 30.0, "2024-01-01 10:00", "f")], d);
        assert_eq!(one[0].hourly_inactive[9], 30.0);
        assert_eq!(one[0].hourly_fluct[9], 1);
        let two = aggregate_cell_days(&[rec("c", "2024-01-01 09:50", 30.0, "2024-01-01 10:30", "f")], d);
        assert_eq!(two[0].hourly_inactive[9], 10.0);
        assert_eq!(two[0].hourly_inactive[10], 20.0);
        assert_eq!(two[0].total_fluct(), 1);
        assert!(aggregate_cell_days(&[], d).is_empty());
    }

    #[test]
    fn midnight_spill() {
        let r1 = rec("c", "2024-01-01 23:50", 30.0, "2024-01-02 00:30", "f");
        let r2 = rec("d", "2024-01-02 05:00", 1.0, "2024-01-02 05:10", "f");
        let agg = aggregate_all(&[r1.clone(), r2.clone()]);
        assert_eq!(agg.dropped_alarms, 0);
        let c: Vec<&CellDay> = agg.cell_days.iter().filter(|c| c.cell_id == "c").collect();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].hourly_inactive[23], 10.0);
        assert_eq!(c[1].hourly_inactive[0], 20.0);
        assert_eq!(c[1].total_fluct(), 0);

        let alone = aggregate_all(&[r1]);
        assert_eq!(alone.dropped_alarms, 1);
        assert!((alone.dropped_minutes - 20.0).abs() < 1e-12);
        assert_eq!(alone.cell_days.len(), 1);
    }

    #[test]
    fn overlapping_alarms_stay_within_hour() {
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let recs = [
            rec("c", "2024-01-01 09:00", 50.0, "2024-01-01 10:00", "f"),
            rec("c", "2024-01-01 09:10", 50.0, "2024-01-01 10:00", "f"),
        ];
        let cd = &aggregate_cell_days(&recs, d)[0];
        assert_eq!(cd.hourly_inactive[9], 60.0);
        assert_eq!(cd.hourly_inactive[10], 0.0);
        assert_eq!(cd.hourly_fluct[9], 2);
    }

    #[test]
    fn cell_day_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cd.csv");
        let mut cd = CellDay::empty("NX_0001", NaiveDate::from_ymd_opt(2024, 3, 2).unwrap(), Vendor::Y, Region::new(4).unwrap());
        cd.hourly_inactive[3] = 12.345678901;
        cd.hourly_fluct[3] = 2;
        write_cell_days(&p, std::slice::from_ref(&cd)).unwrap();
        assert_eq!(read_cell_days(&p).unwrap(), vec![cd]);
    }

    fn brute_dedup(records: &[AlarmRecord]) -> Vec<AlarmRecord> {
        let mut keys: Vec<(String, NaiveDateTime)> = records.iter().map(|r| (r.cell_id.clone(), r.alarm_start)).collect();
        keys.sort();
        keys.dedup();
        keys.iter()
            .map(|(c, s)| {
                let group: Vec<&AlarmRecord> = records.iter().filter(|r| &r.cell_id == c && r.alarm_start == *s).collect();
                let maxd = group.iter().map(|r| r.duration_min).fold(f64::MIN, f64::max);
                let g2: Vec<&&AlarmRecord> = group.iter().filter(|r| r.duration_min == maxd).collect();
                let maxt = g2.iter().map(|r| r.snapshot_time).max().unwrap();
                let g3 = g2.iter().filter(|r| r.snapshot_time == maxt);
                (**g3.min_by(|a, b| a.source_file.cmp(&b.source_file)).unwrap()).clone()
            })
            .collect()
    }

    fn arb_records(max: usize) -> impl Strategy<Value = Vec<AlarmRecord>> {
        prop::collection::vec((0..4usize, 0..3i64, 0..1440i64, 0..200u32, 0..3u32, 0..3usize), 0..max).prop_map(|v| {
            v.into_iter()
                .map(|(c, day, minute, dur, snap, file)| {
                    let start = ts("2024-01-01 00:00") + Duration::days(day) + Duration::minutes(minute);
                    AlarmRecord {
                        snapshot_time: start + Duration::minutes(i64::from(dur + snap)),
                        vendor: Vendor::X,
                        region: Region::new(c).unwrap(),
                        cell_id: format!("NX_{c:04}"),
                        alarm_start: start,
                        duration_min: f64::from(dur) / 2.0,
                        source_file: format!("f{file}.csv"),
                        raw_fields: BTreeMap::new(),
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dedup_matches_bruteforce(records in arb_records(50)) {
            prop_assert_eq!(dedup(&records), brute_dedup(&records));
        }

        #[test]
        fn dedup_idempotent(records in arb_records(50)) {
            let once = dedup(&records);
            prop_assert_eq!(dedup(&once), once);
        }

        #[test]
        fn aggregate_permutation_invariant(records in arb_records(40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let recs = dedup(&records);
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate_all(&recs), aggregate_all(&shuffled));
        }

        #[test]
        fn aggregate_invariants(records in arb_records(60)) {
            let recs = dedup(&records);
            let agg = aggregate_all(&recs);
            for cd in &agg.cell_days {
                prop_assert!(cd.validate().is_ok());
                let total: f64 = cd.hourly_inactive.iter().sum();
                prop_assert!((total - cd.total_inactive_min()).abs() < 1e-9);
            }
            let dates: BTreeSet<NaiveDate> = recs.iter().map(|r| r.alarm_start.date()).collect();
            for d in dates {
                let pairs = recs.iter().filter(|r| r.alarm_start.date() == d).count() as u32;
                let flucts: u32 = agg.cell_days.iter().filter(|c| c.date == d).map(|c| c.total_fluct()).sum();
                prop_assert_eq!(pairs, flucts);
            }
        }

        #[test]
        fn disjoint_alarms_conserve_minutes(cells in 1usize..4, gaps in prop::collection::vec((1u32..120, 1u32..90), 1..20)) {
            // One chain of non-overlapping alarms per cell over a three-day span.
            let mut recs = Vec::new();
            let mut expected = 0.0;
            let origin = ts("2024-01-01 00:00");
            for c in 0..cells {
                let mut t = 0i64;
                for &(gap, dur) in &gaps {
                    t += i64::from(gap);
                    let start = origin + Duration::minutes(t);
                    if start.date() > ts("2024-01-03 00:00").date() {
                        break;
                    }
                    recs.push(AlarmRecord {
                        snapshot_time: start + Duration::minutes(i64::from(dur)),
                        vendor: Vendor::X,
                        region: Region::new(0).unwrap(),
                        cell_id: format!("NX_{c:04}"),
                        alarm_start: start,
                        duration_min: f64::from(dur),
                        source_file: "f.csv".into(),
                        raw_fields: BTreeMap::new(),
                    });
                    expected += f64::from(dur);
                    t += i64::from(dur);
                }
            }
            let agg = aggregate_all(&recs);
            let total: f64 = agg.cell_days.iter().map(|c| c.total_inactive_min()).sum();
            prop_assert!((total + agg.dropped_minutes - expected).abs() < 1e-6);
        }
    }
}
