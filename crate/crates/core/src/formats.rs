//! Canonical CSV schemas.
//!
//! Reports: `epoch,zipcode,rating,smell_description,symptoms,notes`.
//! Sensors: `epoch,station_id,channel,value` (empty value = MISSING).
//! The store's report files append `report_id,display_latitude,display_longitude`
//! after the canonical columns so the canonical prefix stays readable by any
//! consumer of the exported format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    hour_floor_secs, Channel, DomainError, InteractionEvent, InteractionKind, Rating, ReportId, SensorReading,
    SmellReport, StationId, ZipCode,
};

pub const REPORT_HEADER: [&str; 6] = ["epoch", "zipcode", "rating", "smell_description", "symptoms", "notes"];
pub const STORED_REPORT_HEADER: [&str; 9] = [
    "epoch",
    "zipcode",
    "rating",
    "smell_description",
    "symptoms",
    "notes",
    "report_id",
    "display_latitude",
    "display_longitude",
];
pub const SENSOR_HEADER: [&str; 4] = ["epoch", "station_id", "channel", "value"];
pub const INTERACTION_HEADER: [&str; 4] = ["anon_user_id", "hit_at", "data_at", "kind"];

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected header {found:?}")]
    Header { found: Vec<String> },
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn opt_text(s: &str) -> Option<String> {
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

fn opt_f64(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>().map(Some).map_err(|e| format!("{s:?}: {e}"))
    }
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Deterministic id for a report imported from a canonical file that carries
/// no id column; `ordinal` disambiguates identical rows.
pub fn imported_report_id(record: &csv::StringRecord, ordinal: u64) -> ReportId {
    let mut h = Sha256::new();
    for field in record.iter().take(6) {
        h.update(field.as_bytes());
        h.update([0x1f]);
    }
    h.update(ordinal.to_le_bytes());
    let digest = h.finalize();
    ReportId(format!("imp-{}", hex::encode(&digest[..8])))
}

fn parse_report_row(record: &csv::StringRecord, ordinal: u64) -> Result<SmellReport, String> {
    if record.len() != 6 && record.len() != 9 {
        return Err(format!("expected 6 or 9 fields, got {}", record.len()));
    }
    let epoch: i64 = record[0].parse().map_err(|e| format!("epoch: {e}"))?;
    let zip = ZipCode::new(&record[1]).map_err(|e| e.to_string())?;
    let rating_raw: i64 = record[2].parse().map_err(|e| format!("rating: {e}"))?;
    let rating = Rating::new(rating_raw).map_err(|e| e.to_string())?;
    let (report_id, lat, lon) = if record.len() == 9 {
        (
            ReportId(record[6].to_string()),
            opt_f64(&record[7])?,
            opt_f64(&record[8])?,
        )
    } else {
        (imported_report_id(record, ordinal), None, None)
    };
    Ok(SmellReport {
        report_id,
        observed_at: epoch,
        zip_code: zip,
        rating,
        smell_description: opt_text(&record[3]),
        symptoms: opt_text(&record[4]),
        notes: opt_text(&record[5]),
        display_latitude: lat,
        display_longitude: lon,
    })
}

/// Reads either the canonical or the stored report layout. Malformed rows
/// are an error here; use [`read_reports_lenient`] to skip them.
pub fn read_reports<R: Read>(reader: R) -> Result<Vec<SmellReport>, FormatError> {
    let (rows, bad) = read_reports_inner(reader, false)?;
    debug_assert_eq!(bad, 0);
    Ok(rows)
}

pub fn read_reports_lenient<R: Read>(reader: R) -> Result<(Vec<SmellReport>, usize), FormatError> {
    read_reports_inner(reader, true)
}

fn read_reports_inner<R: Read>(reader: R, lenient: bool) -> Result<(Vec<SmellReport>, usize), FormatError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != REPORT_HEADER && names != STORED_REPORT_HEADER {
        return Err(FormatError::Header {
            found: names.into_iter().map(String::from).collect(),
        });
    }
    let mut out = Vec::new();
    let mut bad = 0;
    for (ordinal, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match parse_report_row(&rec, ordinal as u64) {
            Ok(r) => out.push(r),
            Err(reason) if lenient => {
                log::warn!("skipping report row {}: {reason}", ordinal + 2);
                bad += 1;
            }
            Err(reason) => {
                return Err(FormatError::Row {
                    line: ordinal as u64 + 2,
                    reason,
                })
            }
        }
    }
    Ok((out, bad))
}

fn report_fields(r: &SmellReport) -> [String; 6] {
    [
        r.observed_at.to_string(),
        r.zip_code.to_string(),
        r.rating.to_string(),
        r.smell_description.clone().unwrap_or_default(),
        r.symptoms.clone().unwrap_or_default(),
        r.notes.clone().unwrap_or_default(),
    ]
}

/// Canonical six-column export.
pub fn write_reports<W: Write>(writer: W, reports: &[SmellReport]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record(report_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stored_report<W: Write>(w: &mut csv::Writer<W>, r: &SmellReport) -> Result<(), FormatError> {
    let base = report_fields(r);
    let mut rec: Vec<String> = base.to_vec();
    rec.push(r.report_id.0.clone());
    rec.push(fmt_opt_f64(r.display_latitude));
    rec.push(fmt_opt_f64(r.display_longitude));
    w.write_record(&rec)?;
    Ok(())
}

/// Outcome of parsing a sensor file.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorBatch {
    pub readings: Vec<SensorReading>,
    pub malformed: usize,
    pub unknown_channel: usize,
}

/// Parses one sensor row and normalizes it: timestamp floored to the hour,
/// wind direction reduced modulo 360.
pub fn parse_sensor_row(record: &csv::StringRecord) -> Result<Option<SensorReading>, String> {
    if record.len() != 4 {
        return Err(format!("expected 4 fields, got {}", record.len()));
    }
    let epoch: i64 = record[0].trim().parse().map_err(|e| format!("epoch: {e}"))?;
    if epoch < 0 {
        return Err("negative epoch".into());
    }
    let station = record[1].trim();
    if station.is_empty() {
        return Err("empty station id".into());
    }
    let channel = match record[2].trim().parse::<Channel>() {
        Ok(c) => c,
        Err(_) => return Ok(None),
    };
    let mut value = opt_f64(record[3].trim())?;
    if let Some(v) = value {
        if !v.is_finite() {
            return Err(format!("non-finite value {v}"));
        }
        if channel == Channel::WindDirDeg {
            value = Some(v.rem_euclid(360.0));
        }
    }
    Ok(Some(SensorReading {
        station_id: StationId(station.to_string()),
        channel,
        observed_at: hour_floor_secs(epoch),
        value,
    }))
}

pub fn read_sensors<R: Read>(reader: R) -> Result<SensorBatch, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != SENSOR_HEADER {
        return Err(FormatError::Header {
            found: names.into_iter().map(String::from).collect(),
        });
    }
    let mut batch = SensorBatch::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping sensor row {}: {e}", i + 2);
                batch.malformed += 1;
                continue;
            }
        };
        match parse_sensor_row(&rec) {
            Ok(Some(r)) => batch.readings.push(r),
            Ok(None) => {
                log::warn!("dropping sensor row {} with unknown channel {:?}", i + 2, &rec[2]);
                batch.unknown_channel += 1;
            }
            Err(reason) => {
                log::warn!("skipping sensor row {}: {reason}", i + 2);
                batch.malformed += 1;
            }
        }
    }
    Ok(batch)
}

pub fn sensor_fields(r: &SensorReading) -> [String; 4] {
    [
        r.observed_at.to_string(),
        r.station_id.0.clone(),
        r.channel.as_str().to_string(),
        fmt_opt_f64(r.value),
    ]
}

pub fn write_sensors<W: Write>(writer: W, readings: &[SensorReading]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SENSOR_HEADER)?;
    for r in readings {
        w.write_record(sensor_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn interaction_fields(e: &InteractionEvent) -> [String; 4] {
    [
        e.anon_user_id.clone(),
        e.hit_at.to_string(),
        e.data_at.map(|t| t.to_string()).unwrap_or_default(),
        e.kind.as_str().to_string(),
    ]
}

pub fn read_interactions<R: Read>(reader: R) -> Result<Vec<InteractionEvent>, FormatError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != INTERACTION_HEADER {
        return Err(FormatError::Header {
            found: names.into_iter().map(String::from).collect(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = || -> Result<InteractionEvent, String> {
            Ok(InteractionEvent {
                anon_user_id: rec[0].to_string(),
                hit_at: rec[1].parse().map_err(|e| format!("hit_at: {e}"))?,
                data_at: if rec[2].is_empty() {
                    None
                } else {
                    Some(rec[2].parse().map_err(|e| format!("data_at: {e}"))?)
                },
                kind: rec[3].parse::<InteractionKind>().map_err(|e| e.to_string())?,
            })
        };
        out.push(row().map_err(|reason| FormatError::Row {
            line: i as u64 + 2,
            reason,
        })?);
    }
    Ok(out)
}

pub fn write_interactions<W: Write>(writer: W, events: &[InteractionEvent]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(INTERACTION_HEADER)?;
    for e in events {
        w.write_record(interaction_fields(e))?;
    }
    w.flush()?;
    Ok(())
}
