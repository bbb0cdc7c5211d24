//! Batch pipeline stages and the run configuration that drives them.
//!
//! Stages only talk to each other through files under the work directory:
//!
//! ```text
//! snapshots/alarms_*.csv        synth (or an external input dir)
//! cell_days.csv                 ingest
//! features_{train,test}.csv     features (+ feature_manifest.txt)
//! labels.csv, ks_check.csv      label
//! models/<model>.ckpt           train (+ <model>_train_log.csv)
//! predictions/<model>.csv       predict
//! reports/...                   evaluate, report
//! manifests/<stage>.txt         every stage
//! ```
//!
//! Each manifest echoes the run configuration and lists SHA-256 hashes of
//! the stage inputs and outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use log::info;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{self, ModelMetrics};
use crate::features::{self, Sample};
use crate::ingest::{self, CellDay, DATE_FORMAT, HOURS};
use crate::itransformer::{self, ITransformer, ITransformerConfig, QuantilePrediction};
use crate::kv::{join, KeyValues};
use crate::labels::{self, ThresholdLabels, TARGET_NAMES};
use crate::nn::checkpoint::Checkpoint;
use crate::pctn::{self, PctnConfig, PctnModel};
use crate::synth::{self, SynthConfig};

pub const WORK_DIR_ENV: &str = "CELLTHRESH_WORK_DIR";
pub const NAIVE: &str = "naive_mean";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Pctn,
    ITransformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Pctn, ModelKind::ITransformer];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pctn => pctn::KIND,
            ModelKind::ITransformer => itransformer::KIND,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pctn" => Ok(ModelKind::Pctn),
            "itransformer" => Ok(ModelKind::ITransformer),
            other => Err(Error::Config(format!("unknown model {other:?} (expected pctn or itransformer)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Features,
    Label,
    Train,
    Predict,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// A failure tagged with the stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

fn at<T>(stage: Stage, r: Result<T>) -> StageResult<T> {
    r.map_err(|source| StageError {
        stage: stage.name(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/reports`.
    pub report_dir: Option<PathBuf>,
    /// Existing snapshot directory; when set the synth stage is skipped.
    pub input_dir: Option<PathBuf>,
    pub models: Vec<ModelKind>,
    pub n_test_dates: usize,
    pub ks_holdout_fraction: f64,
    pub synth: SynthConfig,
    pub pctn: PctnConfig,
    pub itransformer: ITransformerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            work_dir: PathBuf::from("work"),
            report_dir: None,
            input_dir: None,
            models: vec![ModelKind::Pctn],
            n_test_dates: 3,
            ks_holdout_fraction: 0.15,
            synth: SynthConfig::default(),
            pctn: PctnConfig::default(),
            itransformer: ITransformerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every key with its current value. Model seeds follow the run seed and
    /// are not listed separately.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("work_dir", self.work_dir.display());
        if let Some(p) = &self.report_dir {
            kv.set("report_dir", p.display());
        }
        if let Some(p) = &self.input_dir {
            kv.set("input_dir", p.display());
        }
        kv.set("models", join(&self.models));
        kv.set("n_test_dates", self.n_test_dates);
        kv.set("ks_holdout_fraction", self.ks_holdout_fraction);
        kv.set("synth.n_cells", self.synth.n_cells);
        kv.set("synth.n_days", self.synth.n_days);
        kv.set("synth.start_date", self.synth.start_date.format(DATE_FORMAT));
        kv.set("synth.weekend_multiplier", self.synth.weekend_multiplier);
        kv.set("synth.fluct_floor_share", self.synth.fluct_floor_share);
        kv.set("synth.vendor_mix", join(&self.synth.vendor_mix));
        for (prefix, sub) in [("pctn.", self.pctn_kv()), ("itransformer.", self.itransformer_kv())] {
            for k in sub.keys() {
                kv.set(format!("{prefix}{k}"), sub.raw(k).unwrap_or_default());
            }
        }
        kv
    }

    fn pctn_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.pctn.write_kv(&mut kv);
        strip_fixed(kv, &["seed", "ctx_in", "hourly_tokens"])
    }

    fn itransformer_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.itransformer.write_kv(&mut kv);
        strip_fixed(kv, &["seed", "n_features", "quantiles"])
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Apply `kv` on top of the defaults. Unknown keys are rejected.
    /// `train.*` keys set both models' training options before the
    /// model-specific `pctn.train.*` and `itransformer.train.*` keys.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut known: BTreeSet<String> = cfg.to_kv().keys().map(String::from).collect();
        known.extend(["report_dir", "input_dir"].map(String::from));
        let shared = shared_train_keys();
        for k in kv.keys() {
            if !known.contains(k) && !shared.contains(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        kv.read_into("seed", &mut cfg.seed)?;
        if let Some(p) = kv.raw("work_dir") {
            cfg.work_dir = PathBuf::from(p);
        }
        cfg.report_dir = kv.raw("report_dir").filter(|s| !s.is_empty()).map(PathBuf::from);
        cfg.input_dir = kv.raw("input_dir").filter(|s| !s.is_empty()).map(PathBuf::from);
        if let Some(m) = kv.get_list::<ModelKind>("models")? {
            let mut m = m;
            m.sort();
            m.dedup();
            cfg.models = m;
        }
        kv.read_into("n_test_dates", &mut cfg.n_test_dates)?;
        kv.read_into("ks_holdout_fraction", &mut cfg.ks_holdout_fraction)?;
        kv.read_into("synth.n_cells", &mut cfg.synth.n_cells)?;
        kv.read_into("synth.n_days", &mut cfg.synth.n_days)?;
        if let Some(d) = kv.raw("synth.start_date") {
            cfg.synth.start_date = NaiveDate::parse_from_str(d, DATE_FORMAT)
                .map_err(|e| Error::Config(format!("synth.start_date = {d:?}: {e}")))?;
        }
        kv.read_into("synth.weekend_multiplier", &mut cfg.synth.weekend_multiplier)?;
        kv.read_into("synth.fluct_floor_share", &mut cfg.synth.fluct_floor_share)?;
        if let Some(v) = kv.get_list::<f64>("synth.vendor_mix")? {
            cfg.synth.vendor_mix = v
                .try_into()
                .map_err(|_| Error::Config("synth.vendor_mix needs 3 values".into()))?;
        }
        cfg.pctn.train.read_kv(kv, "train.")?;
        cfg.itransformer.train.read_kv(kv, "train.")?;
        cfg.pctn.read_kv(&kv.with_prefix("pctn."))?;
        cfg.itransformer.read_kv(&kv.with_prefix("itransformer."))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        self.synth.seed = self.seed;
        self.pctn.seed = self.seed;
        self.itransformer.seed = self.seed;
    }

    /// Config file (optional), then the work-dir environment variable, then
    /// `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KeyValues::parse(&text, &p.display().to_string())?
            }
            None => KeyValues::new(),
        };
        if let Ok(dir) = std::env::var(WORK_DIR_ENV) {
            if !dir.is_empty() {
                kv.set("work_dir", dir);
            }
        }
        for o in overrides {
            let (k, v) = KeyValues::parse_override(o)?;
            kv.set(k, v);
        }
        RunConfig::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        if self.n_test_dates == 0 {
            return Err(Error::Config("n_test_dates must be positive".into()));
        }
        let reports = self.report_dir();
        let mut dirs = vec![self.work_dir.clone(), reports];
        dirs.extend(self.input_dir.clone());
        let unique: BTreeSet<&PathBuf> = dirs.iter().collect();
        if unique.len() != dirs.len() {
            return Err(Error::Config("work, report and input directories must be distinct".into()));
        }
        self.synth.validate()?;
        self.pctn.validate()?;
        self.itransformer.validate()
    }

    pub fn report_dir(&self) -> PathBuf {
        self.report_dir.clone().unwrap_or_else(|| self.work_dir.join("reports"))
    }

    pub fn layout(&self) -> Layout {
        Layout {
            work: self.work_dir.clone(),
            reports: self.report_dir(),
            snapshots: self.input_dir.clone().unwrap_or_else(|| self.work_dir.join("snapshots")),
        }
    }
}

fn strip_fixed(kv: KeyValues, drop: &[&str]) -> KeyValues {
    let mut out = KeyValues::new();
    for k in kv.keys().filter(|k| !drop.contains(k)) {
        out.set(k, kv.raw(k).unwrap_or_default());
    }
    out
}

fn shared_train_keys() -> BTreeSet<String> {
    let mut kv = KeyValues::new();
    crate::train::TrainConfig::default().write_kv(&mut kv, "train.");
    kv.keys().map(String::from).collect()
}

/// File locations of every artifact.
#[derive(Clone, Debug)]
pub struct Layout {
    pub work: PathBuf,
    pub reports: PathBuf,
    pub snapshots: PathBuf,
}

impl Layout {
    pub fn cell_days(&self) -> PathBuf {
        self.work.join("cell_days.csv")
    }
    pub fn features_train(&self) -> PathBuf {
        self.work.join("features_train.csv")
    }
    pub fn features_test(&self) -> PathBuf {
        self.work.join("features_test.csv")
    }
    pub fn feature_manifest(&self) -> PathBuf {
        self.work.join("feature_manifest.txt")
    }
    pub fn labels(&self) -> PathBuf {
        self.work.join("labels.csv")
    }
    pub fn ks_check(&self) -> PathBuf {
        self.work.join("ks_check.csv")
    }
    pub fn checkpoint(&self, m: ModelKind) -> PathBuf {
        self.work.join("models").join(format!("{m}.ckpt"))
    }
    pub fn train_log(&self, m: ModelKind) -> PathBuf {
        self.work.join("models").join(format!("{m}_train_log.csv"))
    }
    pub fn predictions(&self, m: ModelKind) -> PathBuf {
        self.work.join("predictions").join(format!("{m}.csv"))
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.work.join("manifests").join(format!("{stage}.txt"))
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.reports.join("metrics.csv")
    }
    pub fn metrics_txt(&self) -> PathBuf {
        self.reports.join("metrics.txt")
    }
    pub fn wilcoxon(&self) -> PathBuf {
        self.reports.join("wilcoxon.csv")
    }
    pub fn alpha_stats(&self) -> PathBuf {
        self.reports.join("alpha_stats.csv")
    }
    pub fn quantile_spread(&self) -> PathBuf {
        self.reports.join("quantile_spread.csv")
    }
    pub fn data_audit(&self) -> PathBuf {
        self.reports.join("data_audit.csv")
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::State(format!("{} is missing; run the {produced_by} stage first", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn snapshot_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("alarms_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Manifest for one stage run.
struct Manifest<'a> {
    stage: String,
    layout: &'a Layout,
    config: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: Vec<(String, String)>,
}

impl<'a> Manifest<'a> {
    fn new(stage: impl Into<String>, cfg: &RunConfig, layout: &'a Layout) -> Self {
        Manifest {
            stage: stage.into(),
            layout,
            config: cfg.to_text(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: impl fmt::Display) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    fn display(&self, p: &Path) -> String {
        for base in [&self.layout.work, &self.layout.reports, &self.layout.snapshots] {
            if let Ok(rel) = p.strip_prefix(base) {
                return rel.display().to_string();
            }
        }
        p.display().to_string()
    }

    fn write(&self) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "stage = {}", self.stage);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "parallel = {}", crate::par::is_enabled());
        for (k, v) in &self.notes {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (title, files) in [("inputs", &self.inputs), ("outputs", &self.outputs)] {
            let _ = writeln!(s, "[{title}]");
            for f in files {
                let _ = writeln!(s, "{}  {}", sha256_file(f)?, self.display(f));
            }
        }
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config);
        write_file(&self.layout.manifest(&self.stage), &s)
    }
}

/// Synthetic snapshot files into the snapshot directory. Earlier snapshot
/// files there are removed first.
pub fn run_synth(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    if cfg.input_dir.is_some() {
        return Err(Error::Config("input_dir is set; synthetic snapshots would overwrite real input".into()));
    }
    if layout.snapshots.exists() {
        for f in snapshot_files(&layout.snapshots)? {
            std::fs::remove_file(&f).map_err(|e| Error::io(&f, e))?;
        }
    }
    let n = synth::write_snapshots(&cfg.synth, &layout.snapshots)?;
    info!("synth: wrote {n} snapshot files to {}", layout.snapshots.display());
    let mut m = Manifest::new(Stage::Synth.name(), cfg, &layout);
    m.note("snapshot_files", n);
    m.outputs = snapshot_files(&layout.snapshots)?;
    m.write()
}

/// Synthetic cell-days written straight to `cell_days.csv`, bypassing the
/// snapshot files.
pub fn run_synth_cell_days(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    let days = synth::generate_cell_days(&cfg.synth)?;
    ensure_parent(&layout.cell_days())?;
    ingest::write_cell_days(&layout.cell_days(), &days)?;
    let mut m = Manifest::new(Stage::Synth.name(), cfg, &layout);
    m.note("cell_days", days.len());
    m.outputs = vec![layout.cell_days()];
    m.write()
}

pub fn run_ingest(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    let inputs = snapshot_files(&layout.snapshots)?;
    if inputs.is_empty() {
        return Err(Error::State(format!("no alarms_*.csv files in {}", layout.snapshots.display())));
    }
    let parsed = ingest::parse_dir(&layout.snapshots)?;
    let records = ingest::dedup(&parsed.records);
    let agg = ingest::aggregate_all(&records);
    ensure_parent(&layout.cell_days())?;
    ingest::write_cell_days(&layout.cell_days(), &agg.cell_days)?;
    info!(
        "ingest: {} rows, {} unique alarms, {} cell-days",
        parsed.records.len(),
        records.len(),
        agg.cell_days.len()
    );
    let mut m = Manifest::new(Stage::Ingest.name(), cfg, &layout);
    m.note("rows", parsed.records.len());
    m.note("rows_skipped", parsed.skipped);
    m.note("rows_unknown_vendor", parsed.unknown_vendor);
    m.note("unique_alarms", records.len());
    m.note("cell_days", agg.cell_days.len());
    m.note("dropped_spill_alarms", agg.dropped_alarms);
    m.note("dropped_spill_minutes", agg.dropped_minutes);
    m.inputs = inputs;
    m.outputs = vec![layout.cell_days()];
    m.write()
}

fn load_cell_days(layout: &Layout) -> Result<Vec<CellDay>> {
    require(&layout.cell_days(), "ingest")?;
    ingest::read_cell_days(&layout.cell_days())
}

/// Feature rows for the time-ordered split. Scaler and trend are fitted on
/// training dates only; labels are written by the label stage.
pub fn run_features(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    let days = load_cell_days(&layout)?;
    let mut prep = features::prepare_samples(&days, cfg.n_test_dates)?;
    for s in prep.train.iter_mut().chain(prep.test.iter_mut()) {
        s.labels = None;
    }
    features::write_samples(&layout.features_train(), &prep.train)?;
    features::write_samples(&layout.features_test(), &prep.test)?;
    let fm = features::manifest_text(&prep.scaler, &prep.trend, &prep.train_dates);
    let test_dates: Vec<String> = prep.test_dates.iter().map(|d| d.format(DATE_FORMAT).to_string()).collect();
    write_file(&layout.feature_manifest(), &format!("test_dates={}\n{fm}", test_dates.join(",")))?;
    info!("features: {} train rows, {} test rows", prep.train.len(), prep.test.len());
    let mut m = Manifest::new(Stage::Features.name(), cfg, &layout);
    m.note("train_rows", prep.train.len());
    m.note("test_rows", prep.test.len());
    m.note("test_dates", test_dates.join(","));
    m.inputs = vec![layout.cell_days()];
    m.outputs = vec![layout.features_train(), layout.features_test(), layout.feature_manifest()];
    m.write()
}

type Key = (String, NaiveDate, u8);

const LABEL_HEADER: [&str; 7] = ["cell_id", "date", "start_hour", "t1", "t2", "t3", "t4"];

pub fn write_labels(path: &Path, days: &[CellDay]) -> Result<()> {
    ensure_parent(path)?;
    let all = crate::par::map(days, labels::labels_for_day);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(LABEL_HEADER).map_err(|e| Error::csv(path, e))?;
    for (cd, ls) in days.iter().zip(&all) {
        let date = cd.date.format(DATE_FORMAT).to_string();
        for (h, l) in ls.iter().enumerate() {
            let mut row = vec![cd.cell_id.clone(), date.clone(), (h + 1).to_string()];
            row.extend(l.to_array().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<Key, ThresholdLabels>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| Error::csv(path, e))?.iter().map(String::from).collect();
    if header != LABEL_HEADER {
        return Err(Error::Schema(format!("{}: unexpected label header {header:?}", path.display())));
    }
    let perr = |i: usize, m: &str| Error::Parse {
        file: path.display().to_string(),
        message: format!("row {}: {m}", i + 1),
    };
    let mut out = BTreeMap::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let date = NaiveDate::parse_from_str(&row[1], DATE_FORMAT).map_err(|_| perr(i, "bad date"))?;
        let hour: u8 = row[2].parse().map_err(|_| perr(i, "bad start hour"))?;
        let mut a = [0.0; 4];
        for (k, slot) in a.iter_mut().enumerate() {
            *slot = row[3 + k].parse().map_err(|_| perr(i, "bad label"))?;
        }
        out.insert((row[0].to_string(), date, hour), ThresholdLabels::from_array(a)?);
    }
    Ok(out)
}

pub fn run_label(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    let days = load_cell_days(&layout)?;
    write_labels(&layout.labels(), &days)?;
    let ks = labels::ks_holdout_check(&days, cfg.ks_holdout_fraction, cfg.seed)?;
    let mut s = String::from("target,ks_statistic,p_value,n_holdout,n_rest\n");
    for r in &ks {
        let _ = writeln!(s, "{},{:.6},{:.6},{},{}", r.target, r.statistic, r.p_value, r.n_holdout, r.n_rest);
    }
    write_file(&layout.ks_check(), &s)?;
    let mut m = Manifest::new(Stage::Label.name(), cfg, &layout);
    m.note("label_rows", days.len() * HOURS);
    m.inputs = vec![layout.cell_days()];
    m.outputs = vec![layout.labels(), layout.ks_check()];
    m.write()
}

/// Feature rows joined with their labels.
pub fn labelled(path: &Path, labels: &BTreeMap<Key, ThresholdLabels>) -> Result<Vec<Sample>> {
    let mut samples = features::read_samples(path)?;
    for s in &mut samples {
        let key = (s.cell_id.clone(), s.date, s.start_hour);
        let l = labels
            .get(&key)
            .ok_or_else(|| Error::Schema(format!("no label for {} {} h{}", key.0, key.1, key.2)))?;
        s.labels = Some(*l);
    }
    Ok(samples)
}

pub fn run_train(cfg: &RunConfig, model: ModelKind) -> Result<()> {
    let layout = cfg.layout();
    require(&layout.features_train(), "features")?;
    require(&layout.labels(), "label")?;
    let labels = read_labels(&layout.labels())?;
    let samples = labelled(&layout.features_train(), &labels)?;
    let (ck, report) = match model {
        ModelKind::Pctn => {
            let (m, r) = pctn::train(&samples, &cfg.pctn)?;
            info!("train pctn: {} parameters, {} epochs", m.num_params(), r.epochs_run());
            (m.to_checkpoint(), r)
        }
        ModelKind::ITransformer => {
            let (m, r) = itransformer::train(&samples, &cfg.itransformer)?;
            info!("train itransformer: {} parameters, {} epochs", m.num_params(), r.epochs_run());
            (m.to_checkpoint(), r)
        }
    };
    ensure_parent(&layout.checkpoint(model))?;
    ck.save(&layout.checkpoint(model))?;
    write_file(&layout.train_log(model), &report.to_csv())?;
    let mut m = Manifest::new(format!("train_{model}"), cfg, &layout);
    m.note("model", model);
    m.note("epochs_run", report.epochs_run());
    m.note("best_epoch", report.best_epoch.map(|e| e.to_string()).unwrap_or_default());
    m.note("stopped_early", report.stopped_early);
    m.inputs = vec![layout.features_train(), layout.labels()];
    m.outputs = vec![layout.checkpoint(model), layout.train_log(model)];
    m.write()
}

pub fn run_predict(cfg: &RunConfig, model: ModelKind) -> Result<()> {
    let layout = cfg.layout();
    require(&layout.checkpoint(model), "train")?;
    require(&layout.features_test(), "features")?;
    let ck = Checkpoint::load(&layout.checkpoint(model))?;
    let samples = features::read_samples(&layout.features_test())?;
    let csv = match model {
        ModelKind::Pctn => {
            let m = PctnModel::from_checkpoint(&ck)?;
            pctn::predictions_csv(&samples, &m.predict(&samples)?)
        }
        ModelKind::ITransformer => {
            let m = ITransformer::from_checkpoint(&ck)?;
            itransformer::predictions_csv(&samples, &m.predict(&samples)?)
        }
    };
    write_file(&layout.predictions(model), &csv)?;
    let mut m = Manifest::new(format!("predict_{model}"), cfg, &layout);
    m.note("rows", samples.len());
    m.inputs = vec![layout.checkpoint(model), layout.features_test()];
    m.outputs = vec![layout.predictions(model)];
    m.write()
}

/// A prediction CSV loaded by column name.
pub struct PredictionTable {
    pub keys: Vec<Key>,
    columns: BTreeMap<String, Vec<f64>>,
}

impl PredictionTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| Error::csv(path, e))?.iter().map(String::from).collect();
        if header.len() < 3 || header[..3] != ["cell_id", "date", "start_hour"] {
            return Err(Error::Schema(format!("{}: not a prediction file", path.display())));
        }
        let perr = |i: usize, m: &str| Error::Parse {
            file: path.display().to_string(),
            message: format!("row {}: {m}", i + 1),
        };
        let mut keys = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 3];
        for (i, row) in r.records().enumerate() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let date = NaiveDate::parse_from_str(&row[1], DATE_FORMAT).map_err(|_| perr(i, "bad date"))?;
            let hour: u8 = row[2].parse().map_err(|_| perr(i, "bad start hour"))?;
            keys.push((row[0].to_string(), date, hour));
            for (c, col) in cols.iter_mut().enumerate() {
                let cell = &row[3 + c];
                col.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse().map_err(|_| perr(i, "bad value"))?
                });
            }
        }
        Ok(PredictionTable {
            keys,
            columns: header[3..].iter().cloned().zip(cols).collect(),
        })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Schema(format!("prediction file lacks column {name}")))
    }

    /// Rows of the four named columns `<prefix>t<k><suffix>`.
    pub fn rows4(&self, name: impl Fn(&str) -> String) -> Result<Vec<[f64; 4]>> {
        let cols = TARGET_NAMES.map(name);
        let cols = [
            self.column(&cols[0])?,
            self.column(&cols[1])?,
            self.column(&cols[2])?,
            self.column(&cols[3])?,
        ];
        Ok((0..self.keys.len()).map(|i| cols.map(|c| c[i])).collect())
    }

    pub fn thresholds(&self) -> Result<Vec<[f64; 4]>> {
        self.rows4(|t| format!("{t}_hat"))
    }
}

/// Which models `evaluate` compares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSelection {
    /// The configured models.
    Configured,
    /// The naive baseline plus every model with a prediction file.
    All,
    Explicit(Vec<ModelKind>),
}

impl FromStr for ModelSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(ModelSelection::All);
        }
        s.split(',').map(ModelKind::from_str).collect::<Result<Vec<_>>>().map(ModelSelection::Explicit)
    }
}

fn fmt_date_set(dates: &BTreeSet<NaiveDate>) -> String {
    dates.iter().map(|d| d.format(DATE_FORMAT).to_string()).collect::<Vec<_>>().join(",")
}

/// Metrics table and pairwise Wilcoxon tests on per-sample errors.
pub fn run_evaluate(cfg: &RunConfig, selection: &ModelSelection) -> Result<()> {
    let layout = cfg.layout();
    require(&layout.labels(), "label")?;
    require(&layout.feature_manifest(), "features")?;
    let (with_naive, models): (bool, Vec<ModelKind>) = match selection {
        ModelSelection::Configured => (false, cfg.models.clone()),
        ModelSelection::Explicit(m) => (false, m.clone()),
        ModelSelection::All => (
            true,
            ModelKind::ALL.into_iter().filter(|m| layout.predictions(*m).exists()).collect(),
        ),
    };
    if models.is_empty() {
        return Err(Error::State("no model predictions to evaluate; run predict first".into()));
    }
    let labels = read_labels(&layout.labels())?;
    let (train_dates, _) = features::manifest_fit_dates(&read_file(&layout.feature_manifest())?)?;

    let mut tables = Vec::new();
    for &m in &models {
        require(&layout.predictions(m), "predict")?;
        tables.push((m.name().to_string(), PredictionTable::read(&layout.predictions(m))?));
    }
    let keys = &tables[0].1.keys;
    for (name, t) in &tables {
        if &t.keys != keys {
            return Err(Error::Schema(format!("{name} predictions cover different samples")));
        }
    }
    let y: Vec<[f64; 4]> = keys
        .iter()
        .map(|k| {
            labels
                .get(k)
                .map(|l| l.to_array())
                .ok_or_else(|| Error::Schema(format!("no label for {} {} h{}", k.0, k.1, k.2)))
        })
        .collect::<Result<_>>()?;
    let mut preds: Vec<(String, Vec<[f64; 4]>)> = Vec::new();
    if with_naive {
        let train: Vec<[f64; 4]> = labels
            .iter()
            .filter(|(k, _)| train_dates.contains(&k.1))
            .map(|(_, l)| l.to_array())
            .collect();
        let means = eval::target_means(&train)?;
        preds.push((NAIVE.to_string(), vec![means; y.len()]));
    }
    for (name, t) in &tables {
        preds.push((name.clone(), t.thresholds()?));
    }
    let metrics: Vec<ModelMetrics> = preds
        .iter()
        .map(|(name, p)| ModelMetrics::evaluate(name.clone(), &y, p))
        .collect::<Result<_>>()?;
    write_file(&layout.metrics_csv(), &eval::metrics_csv(&metrics))?;
    write_file(&layout.metrics_txt(), &eval::metrics_text(&metrics))?;

    let errors: Vec<Vec<f64>> = preds
        .iter()
        .map(|(_, p)| p.iter().zip(&y).map(|(a, b)| eval::per_sample_error(a, b)).collect())
        .collect();
    let mut w = String::from("model_a,model_b,n_pairs,statistic,p_value,exact,mean_error_a,mean_error_b\n");
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let r = eval::wilcoxon_signed_rank(&errors[i], &errors[j])?;
            let mean = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
            let _ = writeln!(
                w,
                "{},{},{},{},{:e},{},{:.6},{:.6}",
                preds[i].0,
                preds[j].0,
                r.n,
                r.statistic,
                r.p_value,
                r.exact,
                mean(&errors[i]),
                mean(&errors[j])
            );
        }
    }
    write_file(&layout.wilcoxon(), &w)?;
    let mut m = Manifest::new(Stage::Evaluate.name(), cfg, &layout);
    m.note("models", preds.iter().map(|p| p.0.as_str()).collect::<Vec<_>>().join(","));
    m.note("test_rows", y.len());
    m.note("baseline_fit_dates", fmt_date_set(&train_dates));
    m.inputs = vec![layout.labels(), layout.feature_manifest()];
    m.inputs.extend(models.iter().map(|&k| layout.predictions(k)));
    m.outputs = vec![layout.metrics_csv(), layout.metrics_txt(), layout.wilcoxon()];
    m.write()
}

/// Alpha dispersion, quantile spread and a data audit of the cell-days.
pub fn run_report(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    let mut m = Manifest::new(Stage::Report.name(), cfg, &layout);
    let days = load_cell_days(&layout)?;
    write_file(&layout.data_audit(), &synth::distribution_audit(&days).to_csv())?;
    m.inputs.push(layout.cell_days());
    m.outputs.push(layout.data_audit());
    let pctn_preds = layout.predictions(ModelKind::Pctn);
    if pctn_preds.exists() {
        let t = PredictionTable::read(&pctn_preds)?;
        let alphas = t.rows4(|k| format!("alpha_{k}"))?;
        write_file(&layout.alpha_stats(), &eval::alpha_report_csv(&alphas))?;
        m.inputs.push(pctn_preds);
        m.outputs.push(layout.alpha_stats());
    }
    let it_preds = layout.predictions(ModelKind::ITransformer);
    if it_preds.exists() {
        let t = PredictionTable::read(&it_preds)?;
        let (q10, q50, q90) = (
            t.rows4(|k| format!("q10_{k}"))?,
            t.rows4(|k| format!("q50_{k}"))?,
            t.rows4(|k| format!("q90_{k}"))?,
        );
        let preds: Vec<QuantilePrediction> = (0..q10.len())
            .map(|i| QuantilePrediction {
                q: std::array::from_fn(|k| [q10[i][k], q50[i][k], q90[i][k]]),
            })
            .collect();
        let stats = itransformer::quantile_spread_report(&preds);
        write_file(&layout.quantile_spread(), &itransformer::spread_report_csv(&stats))?;
        m.inputs.push(it_preds);
        m.outputs.push(layout.quantile_spread());
    }
    m.write()
}

/// Every stage in order. Synth is skipped when `input_dir` is set.
pub fn run_pipeline(cfg: &RunConfig) -> StageResult<()> {
    if cfg.input_dir.is_none() {
        at(Stage::Synth, run_synth(cfg))?;
    }
    at(Stage::Ingest, run_ingest(cfg))?;
    at(Stage::Features, run_features(cfg))?;
    at(Stage::Label, run_label(cfg))?;
    for &m in &cfg.models {
        at(Stage::Train, run_train(cfg, m))?;
        at(Stage::Predict, run_predict(cfg, m))?;
    }
    at(Stage::Evaluate, run_evaluate(cfg, &ModelSelection::All))?;
    at(Stage::Report, run_report(cfg))
}

/// Run a single stage, tagging errors with its name.
pub fn run_stage(stage: Stage, f: impl FnOnce() -> Result<()>) -> StageResult<()> {
    at(stage, f())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.n_test_dates, 3);
        assert_eq!(cfg.models, vec![ModelKind::Pctn]);
        let cfg = RunConfig::load(
            None,
            &[
                "seed=7".into(),
                "train.epochs=3".into(),
                "itransformer.train.epochs=2".into(),
                "pctn.use_gate=false".into(),
                "models=itransformer,pctn".into(),
            ],
        )
        .unwrap();
        assert_eq!((cfg.pctn.seed, cfg.synth.seed, cfg.itransformer.seed), (7, 7, 7));
        assert_eq!((cfg.pctn.train.epochs, cfg.itransformer.train.epochs), (3, 2));
        assert!(!cfg.pctn.use_gate);
        assert_eq!(cfg.models, vec![ModelKind::Pctn, ModelKind::ITransformer]);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.itransformer.d_model = 16;
        cfg.synth.n_cells = 9;
        let kv = KeyValues::parse(&cfg.to_text(), "t").unwrap();
        assert_eq!(RunConfig::from_kv(&kv).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["models=gbt".into()]).is_err());
        assert!(RunConfig::load(None, &["report_dir=work".into()]).is_err());
        assert!(RunConfig::load(None, &["n_test_dates=0".into()]).is_err());
        assert!(RunConfig::load(None, &["pctn.seed=3".into()]).is_err());
    }

    #[test]
    fn model_selection_parse() {
        assert_eq!("all".parse::<ModelSelection>().unwrap(), ModelSelection::All);
        assert_eq!(
            "pctn".parse::<ModelSelection>().unwrap(),
            ModelSelection::Explicit(vec![ModelKind::Pctn])
        );
        assert!("xgb".parse::<ModelSelection>().is_err());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let e = run_stage(Stage::Ingest, || Err(Error::State("boom".into()))).unwrap_err();
        assert_eq!(e.to_string(), "stage ingest: state error: boom");
    }
}
