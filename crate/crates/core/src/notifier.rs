//! Post-hoc and predictive notifications, the serving model slot and the
//! weekly retraining loop. `Service::tick` is synchronous and deterministic
//! in `now`; the server crate drives it from a timer.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{Datelike, NaiveTime, TimeZone, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_dataset, build_raw_design, descriptor_hash, resample_range, ColumnDescriptor, Dataset, DatasetError,
    FeatureParams, LabelParams, Standardizer, StationTable,
};
use crate::domain::{hour_floor_secs, LocalCalendar, SmellReport, SECONDS_PER_HOUR};
use crate::ensemble::{EnsembleError, ForestModel, ForestParams, Task, Variant};
use crate::evaluation::ForestLearner;
use crate::store::{DispatchRecord, Store, StoreError};

pub const POSTHOC_MESSAGE: &str = "Many residents are reporting poor odors in Pittsburgh. Were you affected by this smell event? Be sure to submit a smell report!";
pub const PREDICTIVE_MESSAGE: &str = "Local weather and pollution data indicates there may be a Pittsburgh smell event in the next few hours. Keep a nose out and report smells you notice.";

pub const WEEK_SECONDS: i64 = 7 * 24 * SECONDS_PER_HOUR;

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error("bad schedule {0:?}; expected e.g. \"Sun 23:00\"")]
    Schedule(String),
    #[error("need at least one week of data, have {hours} hours")]
    NotEnoughData { hours: usize },
    #[error("model descriptor {model} does not match current features {current}")]
    Descriptor { model: String, current: String },
    #[error("no model is being served")]
    NoModel,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] EnsembleError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NotificationKind {
    Posthoc,
    Predictive,
}

impl NotificationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NotificationKind::Posthoc => "POSTHOC",
            NotificationKind::Predictive => "PREDICTIVE",
        }
    }

    pub fn message(self) -> &'static str {
        match self {
            NotificationKind::Posthoc => POSTHOC_MESSAGE,
            NotificationKind::Predictive => PREDICTIVE_MESSAGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub kind: NotificationKind,
    pub message: String,
    pub issued_at: i64,
    pub dedupe_key: String,
}

impl Notification {
    /// Keyed by kind and the start of the hour it was issued in.
    pub fn new(kind: NotificationKind, issued_at: i64) -> Self {
        Self {
            kind,
            message: kind.message().to_string(),
            issued_at,
            dedupe_key: format!("{}:{}", kind.as_str(), hour_floor_secs(issued_at)),
        }
    }

    pub fn record(&self) -> DispatchRecord {
        DispatchRecord {
            issued_at: self.issued_at,
            kind: self.kind.as_str().to_string(),
            dedupe_key: self.dedupe_key.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NotifierConfig {
    /// Poor-odor reports in the trailing hour needed for a post-hoc alert.
    pub posthoc_threshold: usize,
    pub posthoc_rating_floor: u8,
    /// At most one predictive alert per this many hours.
    pub predictive_window_hours: i64,
    pub train_weeks: i64,
    pub retrain: String,
    pub seed: u64,
    pub n_trees: usize,
}

impl Default for NotifierConfig {
    fn default() -> Self {
        Self {
            posthoc_threshold: 15,
            posthoc_rating_floor: 3,
            predictive_window_hours: 8,
            train_weeks: 48,
            retrain: "Sun 23:00".into(),
            seed: 0,
            n_trees: 1000,
        }
    }
}

/// Reports with rating at or above the floor in `[now - 1h, now)`.
pub fn poor_reports_in_last_hour(reports: &[SmellReport], now: i64, floor: u8) -> usize {
    reports
        .iter()
        .filter(|r| r.observed_at >= now - SECONDS_PER_HOUR && r.observed_at < now && r.rating.get() >= floor)
        .count()
}

/// Post-hoc alert if enough poor-odor reports arrived in the trailing hour.
/// Deduplication against earlier alerts happens at dispatch.
pub fn check_posthoc(reports: &[SmellReport], now: i64, cfg: &NotifierConfig) -> Option<Notification> {
    let n = poor_reports_in_last_hour(reports, now, cfg.posthoc_rating_floor);
    (n >= cfg.posthoc_threshold.max(1)).then(|| {
        log::info!(
            "posthoc: {n} reports >= {} in the last hour (threshold {})",
            cfg.posthoc_rating_floor,
            cfg.posthoc_threshold
        );
        Notification::new(NotificationKind::Posthoc, now)
    })
}

// ---------------------------------------------------------------- serving

/// A trained model plus what is needed to turn raw readings into its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedModel {
    pub version: u64,
    pub trained_at: i64,
    /// First and last training sample hour.
    pub train_range: (i64, i64),
    pub n_samples: usize,
    pub columns: Vec<ColumnDescriptor>,
    pub standardizer: Standardizer,
    pub model: ForestModel,
}

impl ServedModel {
    pub fn descriptor_hash(&self) -> String {
        descriptor_hash(&self.columns)
    }

    /// Positive classification of one raw predictor row.
    pub fn predicts_event(&self, columns: &[ColumnDescriptor], raw: &[Option<f64>]) -> Result<bool, NotifyError> {
        let current = descriptor_hash(columns);
        if current != self.model.descriptor_hash {
            return Err(NotifyError::Descriptor {
                model: self.model.descriptor_hash.clone(),
                current,
            });
        }
        let row = self.standardizer.transform_row(raw);
        Ok(match self.model.params.task {
            Task::Classification => self.model.vote_row(&row) == 1,
            Task::Regression => self.model.score_row(&row) >= self.model.params.score_threshold,
        })
    }
}

/// The serving model behind a lock; readers clone the `Arc` and keep using
/// the version they got while a swap happens.
#[derive(Debug, Default)]
pub struct ModelSlot(RwLock<Option<Arc<ServedModel>>>);

impl ModelSlot {
    pub fn current(&self) -> Option<Arc<ServedModel>> {
        self.0.read().expect("model slot").clone()
    }

    /// Installs `m` and returns the version it replaced.
    pub fn swap(&self, m: ServedModel) -> Option<u64> {
        let mut g = self.0.write().expect("model slot");
        g.replace(Arc::new(m)).map(|old| old.version)
    }
}

/// Predictive alert if the served model flags the current row.
pub fn check_predictive(
    served: &ServedModel,
    columns: &[ColumnDescriptor],
    raw: &[Option<f64>],
    now: i64,
) -> Result<Option<Notification>, NotifyError> {
    Ok(served
        .predicts_event(columns, raw)?
        .then(|| Notification::new(NotificationKind::Predictive, now)))
}

// ---------------------------------------------------------------- schedule

/// Weekly local time, e.g. "Sun 23:00".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub weekday: Weekday,
    pub time: NaiveTime,
}

impl FromStr for Schedule {
    type Err = NotifyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NotifyError::Schedule(s.to_string());
        let (day, time) = s.trim().split_once(' ').ok_or_else(bad)?;
        Ok(Self {
            weekday: day.parse().map_err(|_| bad())?,
            time: NaiveTime::parse_from_str(time.trim(), "%H:%M").map_err(|_| bad())?,
        })
    }
}

impl Schedule {
    /// First occurrence strictly after `t`. A time skipped by a DST jump
    /// moves forward by the gap.
    pub fn next_after(&self, t: i64, calendar: &LocalCalendar) -> i64 {
        let tz = calendar.tz();
        let mut date = calendar.local_date(t);
        loop {
            if date.weekday() == self.weekday {
                let local = date.and_time(self.time);
                let at = match tz.from_local_datetime(&local).earliest() {
                    Some(dt) => dt.timestamp(),
                    None => {
                        let later = local + chrono::Duration::hours(1);
                        tz.from_local_datetime(&later)
                            .earliest()
                            .map_or(i64::MAX, |d| d.timestamp())
                    }
                };
                if at > t {
                    return at;
                }
            }
            date = date.succ_opt().expect("date in range");
        }
    }
}

// ---------------------------------------------------------------- sinks

pub trait NotificationSink: Send + Sync {
    fn name(&self) -> &str;
    fn deliver(&self, n: &Notification) -> Result<(), String>;
}

/// Keeps everything delivered, for tests and the API.
#[derive(Debug, Default)]
pub struct MemorySink(Mutex<Vec<Notification>>);

impl MemorySink {
    pub fn delivered(&self) -> Vec<Notification> {
        self.0.lock().expect("sink").clone()
    }
}

impl NotificationSink for MemorySink {
    fn name(&self) -> &str {
        "memory"
    }
    fn deliver(&self, n: &Notification) -> Result<(), String> {
        self.0.lock().expect("sink").push(n.clone());
        Ok(())
    }
}

/// Appends one JSON object per line.
#[derive(Debug)]
pub struct JsonLinesSink {
    path: PathBuf,
    lock: Mutex<()>,
}

impl JsonLinesSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }
}

impl NotificationSink for JsonLinesSink {
    fn name(&self) -> &str {
        "jsonl"
    }
    fn deliver(&self, n: &Notification) -> Result<(), String> {
        let _g = self.lock.lock().expect("sink");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| e.to_string())?;
        let line = serde_json::to_string(n).map_err(|e| e.to_string())?;
        writeln!(f, "{line}").map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------- retrain

/// Everything needed to rebuild features and labels from the store.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub stations: StationTable,
    pub calendar: LocalCalendar,
    pub features: FeatureParams,
    pub labels: LabelParams,
}

impl Pipeline {
    /// Every sample hour the stored readings cover: the first frame starts
    /// one hour after the first reading and the last one ends with it.
    pub fn full_dataset(&self, store: &Store) -> Result<Dataset, NotifyError> {
        let (first, last) = store.sensor_span().ok_or(NotifyError::NotEnoughData { hours: 0 })?;
        let snap = store.snapshot();
        Ok(build_dataset(
            &snap.readings,
            &snap.reports,
            &self.stations,
            &self.calendar,
            self.features,
            &self.labels,
            hour_floor_secs(first) + SECONDS_PER_HOUR,
            hour_floor_secs(last) + SECONDS_PER_HOUR,
        )?)
    }

    /// Raw predictor row for sample hour `floor(now)`, from the last readings.
    pub fn current_row(
        &self,
        store: &Store,
        now: i64,
    ) -> Result<(Vec<ColumnDescriptor>, Vec<Option<f64>>), NotifyError> {
        let layout = self.stations.layout();
        let last = hour_floor_secs(now);
        let first = last - self.features.lags as i64 * SECONDS_PER_HOUR;
        let readings = store.readings_in(first - SECONDS_PER_HOUR, last);
        let frames = resample_range(&readings, first, last, &layout)?;
        let raw = build_raw_design(&frames, &layout, &self.calendar, self.features)?;
        let r = raw.n_rows() - 1;
        Ok((raw.columns.clone(), raw.row(r).to_vec()))
    }
}

/// Fits a classification ET on the trailing `train_weeks` of complete
/// samples before `now`: a sample hour is complete once its whole label
/// horizon has passed.
pub fn weekly_retrain(
    store: &Store,
    pipeline: &Pipeline,
    cfg: &NotifierConfig,
    version: u64,
    now: i64,
) -> Result<ServedModel, NotifyError> {
    let (first_reading, _) = store.sensor_span().ok_or(NotifyError::NotEnoughData { hours: 0 })?;
    let lags = pipeline.features.lags as i64;
    let last = hour_floor_secs(now) - pipeline.labels.horizon_hours as i64 * SECONDS_PER_HOUR;
    // first sample hour whose frame and lags all lie after the first reading
    let data_start = hour_floor_secs(first_reading) + SECONDS_PER_HOUR;
    let window_start = last - cfg.train_weeks * WEEK_SECONDS + SECONDS_PER_HOUR;
    let first_frame = window_start.max(data_start + lags * SECONDS_PER_HOUR) - lags * SECONDS_PER_HOUR;
    if last < first_frame + lags * SECONDS_PER_HOUR {
        return Err(NotifyError::NotEnoughData { hours: 0 });
    }
    let snap = store.snapshot();
    let dataset = build_dataset(
        &snap.readings,
        &snap.reports,
        &pipeline.stations,
        &pipeline.calendar,
        pipeline.features,
        &pipeline.labels,
        first_frame,
        last,
    )?;
    if dataset.len() < 168 {
        return Err(NotifyError::NotEnoughData { hours: dataset.len() });
    }
    let standardizer = Standardizer::fit_all(&dataset.x);
    let x = standardizer.transform(&dataset.x);
    let mut params = ForestParams::new(Variant::ExtraTrees, Task::Classification);
    params.n_trees = cfg.n_trees;
    let hash = descriptor_hash(&dataset.x.columns);
    let model = ForestLearner::new(params).fit(&x, &dataset.labels, cfg.seed, &hash)?;
    let hours = &dataset.x.hours;
    Ok(ServedModel {
        version,
        trained_at: now,
        train_range: (hours[0].hour_start, hours[hours.len() - 1].hour_start),
        n_samples: dataset.len(),
        columns: dataset.x.columns.clone(),
        standardizer,
        model,
    })
}

// ---------------------------------------------------------------- service

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TickOutcome {
    pub retrained: Option<u64>,
    pub dispatched: Vec<Notification>,
    pub alerts: Vec<String>,
}

/// Owns ticks and retrains. Dispatch goes through the store's dispatch log,
/// which refuses a dedupe key it has already seen.
pub struct Service {
    pub store: Arc<Store>,
    pub pipeline: Pipeline,
    pub cfg: NotifierConfig,
    pub slot: ModelSlot,
    schedule: Schedule,
    sinks: Vec<Arc<dyn NotificationSink>>,
    next_retrain: Mutex<Option<i64>>,
    next_version: Mutex<u64>,
}

impl Service {
    pub fn new(store: Arc<Store>, pipeline: Pipeline, cfg: NotifierConfig) -> Result<Self, NotifyError> {
        let schedule: Schedule = cfg.retrain.parse()?;
        Ok(Self {
            store,
            pipeline,
            cfg,
            slot: ModelSlot::default(),
            schedule,
            sinks: Vec::new(),
            next_retrain: Mutex::new(None),
            next_version: Mutex::new(1),
        })
    }

    pub fn add_sink(&mut self, sink: Arc<dyn NotificationSink>) {
        self.sinks.push(sink);
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    /// Retrains now and swaps the served model. On failure the previous
    /// model keeps serving.
    pub fn retrain(&self, now: i64) -> Result<u64, NotifyError> {
        let version = *self.next_version.lock().expect("version");
        let m = weekly_retrain(&self.store, &self.pipeline, &self.cfg, version, now)?;
        if self.store.root().is_some() {
            let blob = m.model.to_bytes();
            let date = self.pipeline.calendar.local_date(now);
            self.store.save_model(date, "cls-et", &blob)?;
        }
        *self.next_version.lock().expect("version") = version + 1;
        log::info!(
            "retrained model v{version} on {} samples {:?}",
            m.n_samples,
            m.train_range
        );
        self.slot.swap(m);
        Ok(version)
    }

    fn recent_kind(&self, kind: NotificationKind, since: i64) -> bool {
        self.store
            .dispatched()
            .iter()
            .any(|d| d.kind == kind.as_str() && d.issued_at > since)
    }

    /// Records and delivers `n` unless it would repeat a dedupe key.
    pub fn dispatch(&self, n: &Notification) -> Result<bool, NotifyError> {
        match self.store.append_dispatch(n.record()) {
            Ok(()) => {}
            Err(StoreError::Rejected(why)) => {
                log::debug!("suppressed {}: {why}", n.dedupe_key);
                return Ok(false);
            }
            Err(e) => return Err(e.into()),
        }
        for s in &self.sinks {
            if let Err(e) = s.deliver(n) {
                log::warn!("sink {} failed for {}: {e}", s.name(), n.dedupe_key);
            }
        }
        Ok(true)
    }

    /// One scheduler step at time `now`: retrain if due, then the post-hoc
    /// and predictive checks.
    pub fn tick(&self, now: i64) -> TickOutcome {
        let mut out = TickOutcome::default();
        let due = {
            let mut next = self.next_retrain.lock().expect("schedule");
            let due = match *next {
                None => self.slot.current().is_none(),
                Some(t) => now >= t,
            };
            if due || next.is_none() {
                *next = Some(self.schedule.next_after(now, &self.pipeline.calendar));
            }
            due
        };
        if due {
            match self.retrain(now) {
                Ok(v) => out.retrained = Some(v),
                Err(e) => out.alerts.push(format!("retrain failed, keeping previous model: {e}")),
            }
        }

        let reports = self.store.reports_in(now - SECONDS_PER_HOUR, now);
        if let Some(n) = check_posthoc(&reports, now, &self.cfg) {
            if !self.recent_kind(NotificationKind::Posthoc, now - SECONDS_PER_HOUR) {
                self.push(&n, &mut out);
            }
        }

        if let Some(served) = self.slot.current() {
            let predicted = self
                .pipeline
                .current_row(&self.store, now)
                .and_then(|(cols, row)| check_predictive(&served, &cols, &row, now));
            match predicted {
                Ok(Some(n)) => {
                    let window = self.cfg.predictive_window_hours * SECONDS_PER_HOUR;
                    if !self.recent_kind(NotificationKind::Predictive, now - window) {
                        self.push(&n, &mut out);
                    }
                }
                Ok(None) => {}
                Err(e) => out.alerts.push(format!("predictive check skipped: {e}")),
            }
        }
        for a in &out.alerts {
            log::warn!("{a}");
        }
        out
    }

    fn push(&self, n: &Notification, out: &mut TickOutcome) {
        match self.dispatch(n) {
            Ok(true) => out.dispatched.push(n.clone()),
            Ok(false) => {}
            Err(e) => out.alerts.push(format!("dispatch failed: {e}")),
        }
    }
}
