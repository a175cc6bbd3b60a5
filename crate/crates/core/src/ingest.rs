//! Report submission (payload validation, zip derivation, privacy skew),
//! the agency forwarding queue and sensor feed pulling with retry.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{hour_floor_secs, Rating, ReportId, SensorReading, SmellReport, CLIENT_TIME_TAG};
use crate::formats::{self, SensorBatch};
use crate::store::{PrivacyConfig, RegionTable, StoreError};

pub const DEFAULT_MAX_TEXT_CHARS: usize = 1024;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("feed unavailable: {0}")]
    Unavailable(String),
    #[error("feed failed after {attempts} attempts: {last}")]
    GaveUp { attempts: u32, last: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What a client sends to `POST /reports`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitPayload {
    pub rating: i64,
    #[serde(default)]
    pub smell_description: Option<String>,
    #[serde(default)]
    pub symptoms: Option<String>,
    #[serde(default)]
    pub notes: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
    #[serde(default)]
    pub send_to_agency: bool,
    #[serde(default)]
    pub client_time: Option<i64>,
}

fn clean_text(field: &str, t: &Option<String>, cap: usize) -> Result<Option<String>, IngestError> {
    match t.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) if s.chars().count() > cap => {
            Err(IngestError::Invalid(format!("{field} longer than {cap} characters")))
        }
        Some(s) => Ok(Some(s.to_string())),
    }
}

/// Fresh random hex id for live submissions.
pub fn new_report_id(rng: &mut impl Rng) -> ReportId {
    let b: [u8; 12] = rng.random();
    ReportId(hex::encode(b))
}

/// Per-report skew seed derived from the id; the configured secret is mixed
/// in by `PrivacyConfig::skew`.
pub fn skew_seed(id: &ReportId) -> u64 {
    let d = Sha256::digest(id.0.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Turns a payload into the persisted report. The zip comes from the raw
/// location before the skew, the timestamp is server receipt time and the
/// client clock is kept only as a metadata line in `notes`.
pub fn build_report(
    p: &SubmitPayload,
    received_at: i64,
    id: ReportId,
    privacy: &PrivacyConfig,
    regions: &RegionTable,
    max_text_chars: usize,
) -> Result<SmellReport, IngestError> {
    let rating = Rating::new(p.rating).map_err(|e| IngestError::Invalid(e.to_string()))?;
    let smell_description = clean_text("smell_description", &p.smell_description, max_text_chars)?;
    let symptoms = clean_text("symptoms", &p.symptoms, max_text_chars)?;
    let mut notes = clean_text("notes", &p.notes, max_text_chars)?;
    if let Some(t) = p.client_time {
        let line = format!("{CLIENT_TIME_TAG}{t}");
        notes = Some(match notes {
            Some(n) => format!("{n}\n{line}"),
            None => line,
        });
    }
    let (lat, lon) = privacy
        .skew(p.latitude, p.longitude, skew_seed(&id))
        .map_err(|e| IngestError::Invalid(e.to_string()))?;
    let zip_code = regions
        .zip_for(p.latitude, p.longitude)
        .ok_or_else(|| IngestError::Invalid("no region configured".into()))?;
    Ok(SmellReport {
        report_id: id,
        observed_at: received_at,
        zip_code,
        rating,
        smell_description,
        symptoms,
        notes,
        display_latitude: Some(lat),
        display_longitude: Some(lon),
    })
}

// ---------------------------------------------------------------- agency

/// Receives a copy of every submitted report.
pub trait AgencySink: Send + Sync {
    fn forward(&self, report: &SmellReport) -> Result<(), String>;
}

/// Appends reports to a canonical CSV spool file.
#[derive(Debug)]
pub struct FileSpool {
    path: PathBuf,
    lock: Mutex<()>,
}

impl FileSpool {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl AgencySink for FileSpool {
    fn forward(&self, report: &SmellReport) -> Result<(), String> {
        let _g = self.lock.lock().expect("spool");
        let fresh = !self.path.exists();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        formats::write_reports(&mut buf, std::slice::from_ref(report)).map_err(|e| e.to_string())?;
        let body = if fresh {
            &buf[..]
        } else {
            // drop the header line
            let nl = buf.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
            &buf[nl..]
        };
        let mut f = f;
        f.write_all(body).map_err(|e| e.to_string())
    }
}

/// Reports that could not be forwarded yet. A failing sink never fails the
/// submission; the report waits here for the next flush.
#[derive(Debug, Default)]
pub struct ForwardQueue(Mutex<VecDeque<SmellReport>>);

impl ForwardQueue {
    pub fn len(&self) -> usize {
        self.0.lock().expect("queue").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tries to forward `report` after anything already queued.
    pub fn submit(&self, sink: &dyn AgencySink, report: SmellReport) {
        self.0.lock().expect("queue").push_back(report);
        self.flush(sink);
    }

    /// Forwards in order until the first failure; returns how many went out.
    pub fn flush(&self, sink: &dyn AgencySink) -> usize {
        let mut q = self.0.lock().expect("queue");
        let mut sent = 0;
        while let Some(r) = q.front() {
            match sink.forward(r) {
                Ok(()) => {
                    q.pop_front();
                    sent += 1;
                }
                Err(e) => {
                    log::warn!("agency sink failed, {} queued: {e}", q.len());
                    break;
                }
            }
        }
        sent
    }
}

// ---------------------------------------------------------------- sensor feeds

/// Source of hourly readings.
pub trait SensorFeed: Send + Sync {
    /// Readings for the hour starting at `hour` (epoch seconds, aligned).
    fn pull(&self, hour: i64) -> Result<SensorBatch, IngestError>;
}

/// Filters the batch to one hour.
pub fn batch_for_hour(batch: SensorBatch, hour: i64) -> SensorBatch {
    SensorBatch {
        readings: batch.readings.into_iter().filter(|r| r.observed_at == hour).collect(),
        ..batch
    }
}

/// A CSV file in the sensor format, re-read on every pull.
#[derive(Debug, Clone)]
pub struct CsvFileFeed {
    pub path: PathBuf,
}

impl SensorFeed for CsvFileFeed {
    fn pull(&self, hour: i64) -> Result<SensorBatch, IngestError> {
        let f = std::fs::File::open(&self.path)
            .map_err(|e| IngestError::Unavailable(format!("{}: {e}", self.path.display())))?;
        let batch = formats::read_sensors(f).map_err(|e| IngestError::Unavailable(e.to_string()))?;
        Ok(batch_for_hour(batch, hour))
    }
}

/// Exponential backoff: `base * 2^attempt`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    pub attempts: u32,
    pub base_ms: u64,
    pub max_ms: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            attempts: 5,
            base_ms: 500,
            max_ms: 30_000,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_ms))
    }
}

/// Pulls `hour`, retrying unavailable feeds. `sleep` is injected so tests
/// and async callers control waiting.
pub fn pull_with_retry(
    feed: &dyn SensorFeed,
    hour: i64,
    policy: &Backoff,
    mut sleep: impl FnMut(Duration),
) -> Result<SensorBatch, IngestError> {
    let hour = hour_floor_secs(hour);
    let mut last = String::new();
    for attempt in 0..policy.attempts.max(1) {
        match feed.pull(hour) {
            Ok(b) => return Ok(b),
            Err(IngestError::Unavailable(e)) => {
                log::warn!("sensor feed attempt {} failed: {e}", attempt + 1);
                last = e;
                if attempt + 1 < policy.attempts {
                    sleep(policy.delay(attempt));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(IngestError::GaveUp {
        attempts: policy.attempts.max(1),
        last,
    })
}

/// Readings not yet in the store, by (station, channel, hour).
pub fn new_readings(existing: &[SensorReading], batch: Vec<SensorReading>) -> Vec<SensorReading> {
    let seen: std::collections::HashSet<(&str, crate::domain::Channel, i64)> = existing
        .iter()
        .map(|r| (r.station_id.0.as_str(), r.channel, r.observed_at))
        .collect();
    batch
        .into_iter()
        .filter(|r| !seen.contains(&(r.station_id.0.as_str(), r.channel, r.observed_at)))
        .collect()
}
