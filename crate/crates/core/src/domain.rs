//! Shared domain types: reports, sensor readings, interaction events and the
//! hour/calendar conventions every other module builds on.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, TimeZone, Timelike};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECONDS_PER_HOUR: i64 = 3600;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("rating {0} is outside 1..=5")]
    Rating(i64),
    #[error("zip code {0:?} is not a 5-digit code")]
    ZipCode(String),
    #[error("unknown channel {0:?}")]
    Channel(String),
    #[error("unknown interaction kind {0:?}")]
    InteractionKind(String),
    #[error("unknown timezone {0:?}")]
    TimeZone(String),
    #[error("negative timestamp {0}")]
    Timestamp(i64),
}

/// Smell rating on the 1 ("just fine") to 5 ("about as bad as it gets") scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: i64) -> Result<Self, DomainError> {
        if (1..=5).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(DomainError::Rating(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Rating {
    type Error = DomainError;
    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Rating> for u8 {
    fn from(r: Rating) -> u8 {
        r.0
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Five-digit postal region code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ZipCode(String);

impl ZipCode {
    pub fn new(code: impl Into<String>) -> Result<Self, DomainError> {
        let code = code.into();
        if code.len() == 5 && code.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Self(code))
        } else {
            Err(DomainError::ZipCode(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ZipCode {
    type Error = DomainError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ZipCode> for String {
    fn from(z: ZipCode) -> String {
        z.0
    }
}

impl fmt::Display for ZipCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportId(pub String);

impl fmt::Display for ReportId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One citizen odor observation as persisted. Raw device coordinates are not
/// part of this type; only the privacy-skewed display location is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmellReport {
    pub report_id: ReportId,
    pub observed_at: i64,
    pub zip_code: ZipCode,
    pub rating: Rating,
    pub smell_description: Option<String>,
    pub symptoms: Option<String>,
    pub notes: Option<String>,
    pub display_latitude: Option<f64>,
    pub display_longitude: Option<f64>,
}

/// Prefix of the metadata line the ingest API appends to `notes`.
pub const CLIENT_TIME_TAG: &str = "client_time=";

/// Splits ingest metadata off stored notes: `(user text, client time)`.
pub fn split_notes(notes: &str) -> (Option<&str>, Option<i64>) {
    let (text, meta) = match notes.rsplit_once('\n') {
        Some((t, m)) if m.starts_with(CLIENT_TIME_TAG) => (Some(t), m),
        _ if notes.starts_with(CLIENT_TIME_TAG) => (None, notes),
        _ => return (Some(notes), None),
    };
    match meta[CLIENT_TIME_TAG.len()..].parse() {
        Ok(t) => (text, Some(t)),
        Err(_) => (Some(notes), None),
    }
}

impl SmellReport {
    /// Notes as the user typed them, without ingest metadata.
    pub fn user_notes(&self) -> Option<&str> {
        self.notes.as_deref().and_then(|n| split_notes(n).0)
    }

    pub fn client_time(&self) -> Option<i64> {
        self.notes.as_deref().and_then(|n| split_notes(n).1)
    }

    /// Alphanumeric characters across the free-text fields.
    pub fn text_characters(&self) -> usize {
        [
            self.smell_description.as_deref(),
            self.symptoms.as_deref(),
            self.user_notes(),
        ]
        .iter()
        .flatten()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).count())
        .sum()
    }
}

/// Raw sensor channels as published by the monitoring network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "PM")]
    Pm,
    #[serde(rename = "SO2")]
    So2,
    #[serde(rename = "CO")]
    Co,
    #[serde(rename = "NOx")]
    Nox,
    #[serde(rename = "O3")]
    O3,
    #[serde(rename = "H2S")]
    H2s,
    #[serde(rename = "WIND_DIR_DEG")]
    WindDirDeg,
    #[serde(rename = "WIND_SPEED")]
    WindSpeed,
    #[serde(rename = "WIND_DIR_STD")]
    WindDirStd,
}

impl Channel {
    pub const ALL: [Channel; 9] = [
        Channel::Pm,
        Channel::So2,
        Channel::Co,
        Channel::Nox,
        Channel::O3,
        Channel::H2s,
        Channel::WindDirDeg,
        Channel::WindSpeed,
        Channel::WindDirStd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Pm => "PM",
            Channel::So2 => "SO2",
            Channel::Co => "CO",
            Channel::Nox => "NOx",
            Channel::O3 => "O3",
            Channel::H2s => "H2S",
            Channel::WindDirDeg => "WIND_DIR_DEG",
            Channel::WindSpeed => "WIND_SPEED",
            Channel::WindDirStd => "WIND_DIR_STD",
        }
    }
}

impl FromStr for Channel {
    type Err = DomainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| DomainError::Channel(s.to_string()))
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationId(pub String);

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A single measurement. `value == None` is the MISSING sentinel, distinct
/// from a measured zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub station_id: StationId,
    pub channel: Channel,
    pub observed_at: i64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InteractionKind {
    MapClick,
    Playback,
    TimelineSelect,
    ReportSubmit,
    Other,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::MapClick => "MAP_CLICK",
            InteractionKind::Playback => "PLAYBACK",
            InteractionKind::TimelineSelect => "TIMELINE_SELECT",
            InteractionKind::ReportSubmit => "REPORT_SUBMIT",
            InteractionKind::Other => "OTHER",
        }
    }

    /// Kinds whose `data_at` refers to previously archived data being viewed.
    pub fn views_data(self) -> bool {
        matches!(
            self,
            InteractionKind::MapClick | InteractionKind::Playback | InteractionKind::TimelineSelect
        )
    }
}

impl FromStr for InteractionKind {
    type Err = DomainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "MAP_CLICK" => InteractionKind::MapClick,
            "PLAYBACK" => InteractionKind::Playback,
            "TIMELINE_SELECT" => InteractionKind::TimelineSelect,
            "REPORT_SUBMIT" => InteractionKind::ReportSubmit,
            "OTHER" => InteractionKind::Other,
            other => return Err(DomainError::InteractionKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub anon_user_id: String,
    pub hit_at: i64,
    pub data_at: Option<i64>,
    pub kind: InteractionKind,
}

/// Start of an hour plus its calendar fields in the configured timezone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HourIndex {
    pub hour_start: i64,
    pub local_hour_of_day: u8,
    /// Monday = 0.
    pub local_day_of_week: u8,
    pub local_day_of_month: u8,
}

/// The single timezone used for every hour-of-day / day-of-week decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalCalendar {
    tz: Tz,
}

impl Default for LocalCalendar {
    fn default() -> Self {
        Self {
            tz: chrono_tz::America::New_York,
        }
    }
}

impl LocalCalendar {
    pub fn new(tz: Tz) -> Self {
        Self { tz }
    }

    pub fn from_name(name: &str) -> Result<Self, DomainError> {
        name.parse::<Tz>()
            .map(Self::new)
            .map_err(|_| DomainError::TimeZone(name.to_string()))
    }

    pub fn tz(&self) -> Tz {
        self.tz
    }

    pub fn name(&self) -> &'static str {
        self.tz.name()
    }

    pub fn hour_floor(&self, t: i64) -> Result<HourIndex, DomainError> {
        if t < 0 {
            return Err(DomainError::Timestamp(t));
        }
        let hour_start = t - t.rem_euclid(SECONDS_PER_HOUR);
        let local = self
            .tz
            .timestamp_opt(hour_start, 0)
            .single()
            .expect("UTC instants map to exactly one local time");
        Ok(HourIndex {
            hour_start,
            local_hour_of_day: local.hour() as u8,
            local_day_of_week: local.weekday().num_days_from_monday() as u8,
            local_day_of_month: local.day() as u8,
        })
    }

    pub fn local_hour(&self, t: i64) -> u8 {
        let local = self.tz.timestamp_opt(t, 0).single().expect("valid instant");
        local.hour() as u8
    }

    /// Local (day of week with Monday = 0, hour of day).
    pub fn day_hour(&self, t: i64) -> (u8, u8) {
        let local = self.tz.timestamp_opt(t, 0).single().expect("valid instant");
        (local.weekday().num_days_from_monday() as u8, local.hour() as u8)
    }

    pub fn local_date(&self, t: i64) -> chrono::NaiveDate {
        self.tz
            .timestamp_opt(t, 0)
            .single()
            .expect("valid instant")
            .date_naive()
    }

    /// First local Monday 00:00 at or after `t`, as epoch seconds.
    pub fn first_monday_at_or_after(&self, t: i64) -> i64 {
        let mut date = self.local_date(t);
        loop {
            if date.weekday() == chrono::Weekday::Mon {
                let midnight = date.and_hms_opt(0, 0, 0).expect("midnight");
                // Midnight always exists in US zones (DST switches at 2 am).
                let start = self
                    .tz
                    .from_local_datetime(&midnight)
                    .earliest()
                    .expect("local midnight exists")
                    .timestamp();
                if start >= t {
                    return start;
                }
            }
            date = date.succ_opt().expect("date in range");
        }
    }
}

pub fn hour_floor_secs(t: i64) -> i64 {
    t - t.rem_euclid(SECONDS_PER_HOUR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hour_floor_boundaries() {
        let cal = LocalCalendar::default();
        assert_eq!(cal.hour_floor(3600).unwrap().hour_start, 3600);
        assert_eq!(cal.hour_floor(3725).unwrap().hour_start, 3600);
        assert!(cal.hour_floor(-1).is_err());
    }

    #[test]
    fn hour_floor_is_idempotent() {
        let cal = LocalCalendar::default();
        for t in [0, 1, 3599, 3600, 1_512_300_000, 1_538_000_123] {
            let a = cal.hour_floor(t).unwrap();
            assert_eq!(cal.hour_floor(a.hour_start).unwrap(), a);
        }
    }

    #[test]
    fn rating_bounds() {
        assert!(Rating::new(0).is_err());
        assert!(Rating::new(6).is_err());
        assert_eq!(Rating::new(5).unwrap().get(), 5);
    }

    #[test]
    fn zip_code_shape() {
        assert!(ZipCode::new("15213").is_ok());
        assert!(ZipCode::new("1521").is_err());
        assert!(ZipCode::new("1521a").is_err());
    }

    #[test]
    fn channel_names_round_trip() {
        for c in Channel::ALL {
            assert_eq!(c.as_str().parse::<Channel>().unwrap(), c);
        }
        assert!("WIND".parse::<Channel>().is_err());
    }

    #[test]
    fn first_monday_anchor() {
        let cal = LocalCalendar::default();
        // 2016-10-31 04:00 UTC is Monday 00:00 EDT; the next Monday is
        // already on EST, one hour later in UTC.
        assert_eq!(cal.first_monday_at_or_after(1_477_886_400), 1_477_886_400);
        assert_eq!(
            cal.first_monday_at_or_after(1_477_886_401),
            1_477_886_400 + 7 * 86_400 + 3600
        );
    }
}
