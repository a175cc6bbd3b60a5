//! Append-only persistence and the privacy skew applied before anything is
//! written.
//!
//! Layout under the data directory:
//!
//! ```text
//! reports/<yyyy-mm>.csv        stored report layout (canonical columns first)
//! sensors/<yyyy-mm>.csv        canonical sensor layout
//! interactions/<yyyy-mm>.csv
//! notifications/dispatch.csv   issued_at,kind,dedupe_key
//! models/<iso-date>/<name>.json
//! ```
//!
//! One writer at a time (a mutex around the file handles); readers take a
//! read lock on the in-memory snapshot, which is only extended after the
//! record has been flushed to disk.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{InteractionEvent, SensorReading, SmellReport, ZipCode};
use crate::formats::{self, FormatError};

/// Mean Earth radius in metres, used for both the skew and its check.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("model blob: {0}")]
    Model(String),
}

pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Destination point `distance_m` away along `bearing_rad` on the sphere.
fn destination(lat: f64, lon: f64, bearing_rad: f64, distance_m: f64) -> (f64, f64) {
    let delta = distance_m / EARTH_RADIUS_M;
    let p1 = lat.to_radians();
    let l1 = lon.to_radians();
    let p2 = (p1.sin() * delta.cos() + p1.cos() * delta.sin() * bearing_rad.cos()).asin();
    let l2 = l1 + (bearing_rad.sin() * delta.sin() * p1.cos()).atan2(delta.cos() - p1.sin() * p2.sin());
    (p2.to_degrees(), l2.to_degrees())
}

/// Lat/lon rectangle, `[min_lat, min_lon, max_lat, max_lon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }

    /// Great-circle distance from the point to the nearest point of the box
    /// (zero when inside).
    pub fn distance_m(&self, lat: f64, lon: f64) -> f64 {
        let clat = lat.clamp(self.min_lat, self.max_lat);
        let clon = lon.clamp(self.min_lon, self.max_lon);
        haversine_m(lat, lon, clat, clon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default = "PrivacyConfig::default_radius")]
    pub skew_radius_m: f64,
    pub metro_bbox: BoundingBox,
    /// Mixed into every per-report skew seed.
    #[serde(default)]
    pub skew_secret: u64,
}

impl PrivacyConfig {
    fn default_radius() -> f64 {
        500.0
    }
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            skew_radius_m: 500.0,
            // Allegheny County, roughly.
            metro_bbox: BoundingBox {
                min_lat: 40.19,
                min_lon: -80.37,
                max_lat: 40.68,
                max_lon: -79.68,
            },
            skew_secret: 0,
        }
    }
}

/// Moves a location to a deterministic pseudo-random point drawn uniformly
/// from the disk of `radius_m` around it.
pub fn skew_location(lat: f64, lon: f64, seed: u64, radius_m: f64) -> (f64, f64) {
    if radius_m <= 0.0 {
        return (lat, lon);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let r = radius_m * u.sqrt();
    destination(lat, lon, theta, r)
}

impl PrivacyConfig {
    pub fn skew(&self, lat: f64, lon: f64, seed: u64) -> Result<(f64, f64), StoreError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(StoreError::Rejected(format!("invalid coordinates ({lat}, {lon})")));
        }
        if !self.metro_bbox.contains(lat, lon) {
            return Err(StoreError::Rejected(format!(
                "coordinates ({lat}, {lon}) outside the metro bounding box"
            )));
        }
        Ok(skew_location(lat, lon, seed ^ self.skew_secret, self.skew_radius_m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub zip: ZipCode,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

/// Looks up the zip region of a raw location: nearest box (distance zero when
/// inside), ties broken by the lowest zip code.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionTable(pub Vec<Region>);

impl RegionTable {
    pub fn zip_for(&self, lat: f64, lon: f64) -> Option<ZipCode> {
        self.0
            .iter()
            .map(|r| (r.bbox.distance_m(lat, lon), &r.zip))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
            .map(|(_, z)| z.clone())
    }

    pub fn contains(&self, zip: &ZipCode) -> bool {
        self.0.iter().any(|r| &r.zip == zip)
    }
}

pub trait Timestamped {
    fn timestamp(&self) -> i64;
}

impl Timestamped for SmellReport {
    fn timestamp(&self) -> i64 {
        self.observed_at
    }
}

impl Timestamped for SensorReading {
    fn timestamp(&self) -> i64 {
        self.observed_at
    }
}

impl Timestamped for InteractionEvent {
    fn timestamp(&self) -> i64 {
        self.hit_at
    }
}

/// Inserts after every element with an equal or earlier timestamp, so equal
/// timestamps keep arrival order.
fn insert_ordered<T: Timestamped>(v: &mut Vec<T>, item: T) {
    let t = item.timestamp();
    let pos = v.partition_point(|x| x.timestamp() <= t);
    v.insert(pos, item);
}

/// Records with timestamp in `[t0, t1)`, in time order.
pub fn range_of<T: Timestamped + Clone>(v: &[T], t0: i64, t1: i64) -> Vec<T> {
    if t1 <= t0 {
        return Vec::new();
    }
    let a = v.partition_point(|x| x.timestamp() < t0);
    let b = v.partition_point(|x| x.timestamp() < t1);
    v[a..b].to_vec()
}

#[derive(Debug, Clone, Default)]
pub struct StoreSnapshot {
    pub reports: Vec<SmellReport>,
    pub readings: Vec<SensorReading>,
    pub interactions: Vec<InteractionEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Reports,
    Sensors,
    Interactions,
    Notifications,
}

impl Stream {
    fn dir(self) -> &'static str {
        match self {
            Stream::Reports => "reports",
            Stream::Sensors => "sensors",
            Stream::Interactions => "interactions",
            Stream::Notifications => "notifications",
        }
    }

    fn header(self) -> &'static [&'static str] {
        match self {
            Stream::Reports => &formats::STORED_REPORT_HEADER,
            Stream::Sensors => &formats::SENSOR_HEADER,
            Stream::Interactions => &formats::INTERACTION_HEADER,
            Stream::Notifications => &DISPATCH_HEADER,
        }
    }
}

pub const DISPATCH_HEADER: [&str; 3] = ["issued_at", "kind", "dedupe_key"];

fn month_file(t: i64) -> String {
    let dt = DateTime::from_timestamp(t, 0).unwrap_or_default();
    format!("{:04}-{:02}.csv", dt.year(), dt.month())
}

/// Append-only record store. `Store::in_memory` keeps nothing on disk.
#[derive(Debug)]
pub struct Store {
    root: Option<PathBuf>,
    snapshot: RwLock<StoreSnapshot>,
    writer: Mutex<()>,
    dispatched: RwLock<Vec<DispatchRecord>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub issued_at: i64,
    pub kind: String,
    pub dedupe_key: String,
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            snapshot: RwLock::new(StoreSnapshot::default()),
            writer: Mutex::new(()),
            dispatched: RwLock::new(Vec::new()),
        }
    }

    /// Opens (creating if needed) a data directory and loads every record.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        for s in [
            Stream::Reports,
            Stream::Sensors,
            Stream::Interactions,
            Stream::Notifications,
        ] {
            fs::create_dir_all(root.join(s.dir()))?;
        }
        fs::create_dir_all(root.join("models"))?;
        let mut snap = StoreSnapshot::default();
        for path in sorted_csvs(&root.join("reports"))? {
            for r in formats::read_reports(BufReader::new(File::open(&path)?))? {
                insert_ordered(&mut snap.reports, r);
            }
        }
        for path in sorted_csvs(&root.join("sensors"))? {
            let batch = formats::read_sensors(BufReader::new(File::open(&path)?))?;
            for r in batch.readings {
                insert_ordered(&mut snap.readings, r);
            }
        }
        for path in sorted_csvs(&root.join("interactions"))? {
            for e in formats::read_interactions(BufReader::new(File::open(&path)?))? {
                insert_ordered(&mut snap.interactions, e);
            }
        }
        let mut dispatched = Vec::new();
        let dispatch_path = root.join("notifications").join("dispatch.csv");
        if dispatch_path.exists() {
            let mut rdr = csv::Reader::from_path(&dispatch_path)?;
            for rec in rdr.deserialize() {
                dispatched.push(rec?);
            }
        }
        Ok(Self {
            root: Some(root),
            snapshot: RwLock::new(snap),
            writer: Mutex::new(()),
            dispatched: RwLock::new(dispatched),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn append_line(&self, stream: Stream, file: &str, fields: &[String]) -> Result<(), StoreError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let path = root.join(stream.dir()).join(file);
        let fresh = !path.exists();
        let f = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::WriterBuilder::new().from_writer(f);
        if fresh {
            w.write_record(stream.header())?;
        }
        w.write_record(fields)?;
        w.flush()?;
        Ok(())
    }

    fn validate_report(r: &SmellReport) -> Result<(), StoreError> {
        for t in [&r.smell_description, &r.symptoms, &r.notes].into_iter().flatten() {
            if t.is_empty() {
                return Err(StoreError::Rejected("empty text field must be absent".into()));
            }
        }
        if r.observed_at < 0 {
            return Err(StoreError::Rejected("negative timestamp".into()));
        }
        Ok(())
    }

    pub fn append_report(&self, report: SmellReport) -> Result<crate::domain::ReportId, StoreError> {
        Self::validate_report(&report)?;
        let _guard = self.writer.lock().expect("writer lock");
        if let Some(root) = &self.root {
            let path = root.join("reports").join(month_file(report.observed_at));
            let fresh = !path.exists();
            let f = OpenOptions::new().create(true).append(true).open(&path)?;
            let mut w = csv::Writer::from_writer(f);
            if fresh {
                w.write_record(formats::STORED_REPORT_HEADER)?;
            }
            formats::write_stored_report(&mut w, &report)?;
            w.flush()?;
        }
        let id = report.report_id.clone();
        insert_ordered(&mut self.snapshot.write().expect("snapshot lock").reports, report);
        Ok(id)
    }

    pub fn append_reading(&self, reading: SensorReading) -> Result<(), StoreError> {
        self.append_readings(vec![reading])
    }

    pub fn append_readings(&self, readings: Vec<SensorReading>) -> Result<(), StoreError> {
        for r in &readings {
            if r.observed_at % crate::domain::SECONDS_PER_HOUR != 0 {
                return Err(StoreError::Rejected(format!(
                    "reading at {} is not hour aligned",
                    r.observed_at
                )));
            }
            if let (crate::domain::Channel::WindDirDeg, Some(v)) = (r.channel, r.value) {
                if !(0.0..360.0).contains(&v) {
                    return Err(StoreError::Rejected(format!("wind direction {v} outside [0, 360)")));
                }
            }
        }
        let _guard = self.writer.lock().expect("writer lock");
        if let Some(root) = &self.root {
            let mut by_file: BTreeMap<String, Vec<&SensorReading>> = BTreeMap::new();
            for r in &readings {
                by_file.entry(month_file(r.observed_at)).or_default().push(r);
            }
            for (file, rows) in by_file {
                let path = root.join("sensors").join(&file);
                let fresh = !path.exists();
                let f = OpenOptions::new().create(true).append(true).open(&path)?;
                let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
                if fresh {
                    w.write_record(formats::SENSOR_HEADER)?;
                }
                for r in rows {
                    w.write_record(formats::sensor_fields(r))?;
                }
                w.flush()?;
            }
        }
        let mut snap = self.snapshot.write().expect("snapshot lock");
        for r in readings {
            insert_ordered(&mut snap.readings, r);
        }
        Ok(())
    }

    pub fn append_interaction(&self, event: InteractionEvent) -> Result<(), StoreError> {
        if event.kind.views_data() && event.data_at.is_none() {
            return Err(StoreError::Rejected(format!(
                "{} events need a data timestamp",
                event.kind.as_str()
            )));
        }
        let _guard = self.writer.lock().expect("writer lock");
        self.append_line(
            Stream::Interactions,
            &month_file(event.hit_at),
            &formats::interaction_fields(&event),
        )?;
        insert_ordered(&mut self.snapshot.write().expect("snapshot lock").interactions, event);
        Ok(())
    }

    pub fn append_dispatch(&self, record: DispatchRecord) -> Result<(), StoreError> {
        let _guard = self.writer.lock().expect("writer lock");
        if self
            .dispatched
            .read()
            .expect("dispatch lock")
            .iter()
            .any(|d| d.dedupe_key == record.dedupe_key)
        {
            return Err(StoreError::Rejected(format!(
                "duplicate dedupe key {}",
                record.dedupe_key
            )));
        }
        self.append_line(
            Stream::Notifications,
            "dispatch.csv",
            &[
                record.issued_at.to_string(),
                record.kind.clone(),
                record.dedupe_key.clone(),
            ],
        )?;
        self.dispatched.write().expect("dispatch lock").push(record);
        Ok(())
    }

    pub fn dispatched(&self) -> Vec<DispatchRecord> {
        self.dispatched.read().expect("dispatch lock").clone()
    }

    pub fn reports_in(&self, t0: i64, t1: i64) -> Vec<SmellReport> {
        range_of(&self.snapshot.read().expect("snapshot lock").reports, t0, t1)
    }

    pub fn readings_in(&self, t0: i64, t1: i64) -> Vec<SensorReading> {
        range_of(&self.snapshot.read().expect("snapshot lock").readings, t0, t1)
    }

    pub fn interactions_in(&self, t0: i64, t1: i64) -> Vec<InteractionEvent> {
        range_of(&self.snapshot.read().expect("snapshot lock").interactions, t0, t1)
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Time span `[first, last]` covered by sensor readings.
    pub fn sensor_span(&self) -> Option<(i64, i64)> {
        let snap = self.snapshot.read().expect("snapshot lock");
        Some((snap.readings.first()?.observed_at, snap.readings.last()?.observed_at))
    }

    /// Canonical six-column export of every report, in time order.
    pub fn export_reports_csv(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        formats::write_reports(&mut out, &self.snapshot.read().expect("snapshot lock").reports)?;
        Ok(out)
    }

    /// Writes a model blob to `models/<date>/<name>.json` through a temporary
    /// file and rename.
    pub fn save_model(&self, date: NaiveDate, name: &str, blob: &[u8]) -> Result<PathBuf, StoreError> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| StoreError::Model("in-memory store has no model directory".into()))?;
        let dir = root.join("models").join(date.format("%Y-%m-%d").to_string());
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        let tmp = dir.join(format!(".{name}.json.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(blob)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Most recent model blob with the given name, if any.
    pub fn latest_model(&self, name: &str) -> Result<Option<(NaiveDate, Vec<u8>)>, StoreError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let mut dates: Vec<NaiveDate> = fs::read_dir(root.join("models"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| NaiveDate::parse_from_str(&e.file_name().to_string_lossy(), "%Y-%m-%d").ok())
            .collect();
        dates.sort();
        for d in dates.into_iter().rev() {
            let p = root
                .join("models")
                .join(d.format("%Y-%m-%d").to_string())
                .join(format!("{name}.json"));
            if p.exists() {
                return Ok(Some((d, fs::read(p)?)));
            }
        }
        Ok(None)
    }
}

fn sorted_csvs(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    v.sort();
    Ok(v)
}

/// Uniform draw helper shared by tests and the synthetic generator.
pub fn random_point_in(bbox: &BoundingBox, rng: &mut impl Rng) -> (f64, f64) {
    (
        rng.random_range(bbox.min_lat..bbox.max_lat),
        rng.random_range(bbox.min_lon..bbox.max_lon),
    )
}
