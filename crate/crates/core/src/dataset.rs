//! Predictor matrix and smell-event labels.
//!
//! Each sample sits at the start of an hour `h`. Its sensor part is the mean
//! of the readings in `[h - 1h, h)`; its label sums the ratings above the
//! rating floor reported within `[h, h + horizon)`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    Channel, HourIndex, LocalCalendar, SensorReading, SmellReport, StationId, ZipCode, SECONDS_PER_HOUR,
};
use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("frames are not contiguous: hour {found} follows {previous}")]
    NotContiguous { previous: i64, found: i64 },
    #[error("need more than {lags} frames to build lagged rows, got {got}")]
    TooFewFrames { lags: usize, got: usize },
    #[error("predictor and label hours do not intersect")]
    EmptyIntersection,
    #[error("frame has {got} values, layout has {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("invalid hour range")]
    BadRange,
}

/// Per-sample channels after circular wind decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FrameChannel {
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
    /// North-south component, `cos(direction)`.
    #[serde(rename = "WIND_COS")]
    WindCos,
    /// East-west component, `sin(direction)`.
    #[serde(rename = "WIND_SIN")]
    WindSin,
    #[serde(rename = "WIND_SPEED")]
    WindSpeed,
    #[serde(rename = "WIND_DIR_STD")]
    WindDirStd,
}

impl FrameChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameChannel::Pm => "PM",
            FrameChannel::So2 => "SO2",
            FrameChannel::Co => "CO",
            FrameChannel::Nox => "NOx",
            FrameChannel::O3 => "O3",
            FrameChannel::H2s => "H2S",
            FrameChannel::WindCos => "WIND_COS",
            FrameChannel::WindSin => "WIND_SIN",
            FrameChannel::WindSpeed => "WIND_SPEED",
            FrameChannel::WindDirStd => "WIND_DIR_STD",
        }
    }

    /// Frame channels derived from one raw channel.
    pub fn from_raw(c: Channel) -> &'static [FrameChannel] {
        match c {
            Channel::Pm => &[FrameChannel::Pm],
            Channel::So2 => &[FrameChannel::So2],
            Channel::Co => &[FrameChannel::Co],
            Channel::Nox => &[FrameChannel::Nox],
            Channel::O3 => &[FrameChannel::O3],
            Channel::H2s => &[FrameChannel::H2s],
            Channel::WindDirDeg => &[FrameChannel::WindCos, FrameChannel::WindSin],
            Channel::WindSpeed => &[FrameChannel::WindSpeed],
            Channel::WindDirStd => &[FrameChannel::WindDirStd],
        }
    }

    pub fn is_wind(self) -> bool {
        matches!(
            self,
            FrameChannel::WindCos | FrameChannel::WindSin | FrameChannel::WindSpeed | FrameChannel::WindDirStd
        )
    }
}

/// `(cos, sin)` of a compass direction in degrees.
pub fn wind_components(deg: f64) -> (f64, f64) {
    let r = deg.to_radians();
    (r.cos(), r.sin())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub id: StationId,
    pub channels: Vec<Channel>,
}

/// Which channels each monitoring station provides, in column order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationTable(pub Vec<StationConfig>);

impl StationTable {
    pub fn layout(&self) -> FrameLayout {
        let mut slots = Vec::new();
        for st in &self.0 {
            for &c in &st.channels {
                for &fc in FrameChannel::from_raw(c) {
                    slots.push((st.id.clone(), fc));
                }
            }
        }
        FrameLayout { slots }
    }
}

/// Ordered `(station, channel)` slots of a [`SensorFrame`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub slots: Vec<(StationId, FrameChannel)>,
}

impl FrameLayout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn slot_of(&self, station: &StationId, ch: FrameChannel) -> Option<usize> {
        self.slots.iter().position(|(s, c)| s == station && *c == ch)
    }
}

/// One hour of resampled readings. `None` = MISSING.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub hour: i64,
    pub values: Vec<Option<f64>>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: f64,
    n: u32,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }
    fn mean(self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn accumulate(layout: &FrameLayout, r: &SensorReading, accs: &mut [Acc]) {
    let Some(v) = r.value else { return };
    if r.channel == Channel::WindDirDeg {
        let (c, s) = wind_components(v);
        if let Some(i) = layout.slot_of(&r.station_id, FrameChannel::WindCos) {
            accs[i].push(c);
        }
        if let Some(i) = layout.slot_of(&r.station_id, FrameChannel::WindSin) {
            accs[i].push(s);
        }
    } else if let Some(i) = layout.slot_of(&r.station_id, FrameChannel::from_raw(r.channel)[0]) {
        accs[i].push(v);
    }
}

/// Mean of the readings in `[hour - 1h, hour)` per slot. Wind directions are
/// decomposed into cosine and sine before averaging.
pub fn resample_hour(readings: &[SensorReading], hour: i64, layout: &FrameLayout) -> SensorFrame {
    let mut accs = vec![Acc::default(); layout.len()];
    for r in readings
        .iter()
        .filter(|r| r.observed_at >= hour - SECONDS_PER_HOUR && r.observed_at < hour)
    {
        accumulate(layout, r, &mut accs);
    }
    SensorFrame {
        hour,
        values: accs.into_iter().map(Acc::mean).collect(),
    }
}

/// Frames for every hour in `[first_hour, last_hour]` in one pass over the
/// readings. Equivalent to calling [`resample_hour`] per hour.
pub fn resample_range(
    readings: &[SensorReading],
    first_hour: i64,
    last_hour: i64,
    layout: &FrameLayout,
) -> Result<Vec<SensorFrame>, DatasetError> {
    if first_hour % SECONDS_PER_HOUR != 0 || last_hour < first_hour {
        return Err(DatasetError::BadRange);
    }
    let n = ((last_hour - first_hour) / SECONDS_PER_HOUR + 1) as usize;
    let width = layout.len();
    let mut accs = vec![Acc::default(); n * width];
    let mut index = std::collections::HashMap::new();
    for (i, (s, c)) in layout.slots.iter().enumerate() {
        index.insert((s.clone(), *c), i);
    }
    for r in readings {
        let Some(v) = r.value else { continue };
        // The reading at `t` feeds the frame that starts at the next hour.
        let frame_hour = r.observed_at - r.observed_at.rem_euclid(SECONDS_PER_HOUR) + SECONDS_PER_HOUR;
        if frame_hour < first_hour || frame_hour > last_hour {
            continue;
        }
        let k = ((frame_hour - first_hour) / SECONDS_PER_HOUR) as usize;
        let row = &mut accs[k * width..(k + 1) * width];
        if r.channel == Channel::WindDirDeg {
            let (c, s) = wind_components(v);
            if let Some(&i) = index.get(&(r.station_id.clone(), FrameChannel::WindCos)) {
                row[i].push(c);
            }
            if let Some(&i) = index.get(&(r.station_id.clone(), FrameChannel::WindSin)) {
                row[i].push(s);
            }
        } else if let Some(&i) = index.get(&(r.station_id.clone(), FrameChannel::from_raw(r.channel)[0])) {
            row[i].push(v);
        }
    }
    Ok((0..n)
        .map(|k| SensorFrame {
            hour: first_hour + k as i64 * SECONDS_PER_HOUR,
            values: accs[k * width..(k + 1) * width].iter().map(|a| a.mean()).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CalendarField {
    DayOfWeek,
    HourOfDay,
    DayOfMonth,
}

impl CalendarField {
    pub const ALL: [CalendarField; 3] = [
        CalendarField::DayOfWeek,
        CalendarField::HourOfDay,
        CalendarField::DayOfMonth,
    ];

    fn value(self, h: &HourIndex) -> f64 {
        match self {
            CalendarField::DayOfWeek => h.local_day_of_week as f64,
            CalendarField::HourOfDay => h.local_hour_of_day as f64,
            CalendarField::DayOfMonth => h.local_day_of_month as f64,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CalendarField::DayOfWeek => "day_of_week",
            CalendarField::HourOfDay => "hour_of_day",
            CalendarField::DayOfMonth => "day_of_month",
        }
    }
}

/// What a predictor column holds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnDescriptor {
    Sensor {
        station: StationId,
        channel: FrameChannel,
        /// Hours back from the sample hour.
        lag: u8,
    },
    Calendar(CalendarField),
    Product(Box<ColumnDescriptor>, Box<ColumnDescriptor>),
}

impl ColumnDescriptor {
    pub fn sensor(&self) -> Option<(&StationId, FrameChannel, u8)> {
        match self {
            ColumnDescriptor::Sensor { station, channel, lag } => Some((station, *channel, *lag)),
            _ => None,
        }
    }
}

impl fmt::Display for ColumnDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnDescriptor::Sensor { station, channel, lag } => {
                write!(f, "{station}.{}", channel.as_str())?;
                if *lag > 0 {
                    write!(f, "@-{lag}h")?;
                }
                Ok(())
            }
            ColumnDescriptor::Calendar(c) => f.write_str(c.as_str()),
            ColumnDescriptor::Product(a, b) => write!(f, "{a} * {b}"),
        }
    }
}

/// Stable digest of a column list; models record it at fit time.
pub fn descriptor_hash(columns: &[ColumnDescriptor]) -> String {
    let mut h = Sha256::new();
    for c in columns {
        h.update(c.to_string().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Predictor values before imputation and scaling. `None` = MISSING.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMatrix {
    pub hours: Vec<HourIndex>,
    pub columns: Vec<ColumnDescriptor>,
    values: Vec<Option<f64>>,
}

impl RawMatrix {
    pub fn new(hours: Vec<HourIndex>, columns: Vec<ColumnDescriptor>, values: Vec<Option<f64>>) -> Self {
        assert_eq!(values.len(), hours.len() * columns.len(), "raw matrix shape");
        Self { hours, columns, values }
    }

    pub fn n_rows(&self) -> usize {
        self.hours.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.values[r * self.columns.len() + c]
    }

    pub fn row(&self, r: usize) -> &[Option<f64>] {
        let w = self.columns.len();
        &self.values[r * w..(r + 1) * w]
    }

    pub fn select_rows(&self, rows: &[usize]) -> RawMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        RawMatrix {
            hours: rows.iter().map(|&r| self.hours[r]).collect(),
            columns: self.columns.clone(),
            values,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> RawMatrix {
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        for r in 0..self.n_rows() {
            let row = self.row(r);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        RawMatrix {
            hours: self.hours.clone(),
            columns: cols.iter().map(|&c| self.columns[c].clone()).collect(),
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    /// No observed value in the fitting rows; the column standardizes to 0.
    pub all_missing: bool,
}

/// Below this standard deviation a column is treated as constant.
pub const MIN_STD: f64 = 1e-12;

/// Mean imputation followed by zero-mean, unit-variance scaling, with
/// statistics fitted on a chosen subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub stats: Vec<ColumnStats>,
}

impl Standardizer {
    pub fn fit(raw: &RawMatrix, rows: &[usize]) -> Self {
        let stats = (0..raw.n_cols())
            .map(|c| {
                let observed: Vec<f64> = rows.iter().filter_map(|&r| raw.get(r, c)).collect();
                if observed.is_empty() {
                    return ColumnStats {
                        mean: 0.0,
                        std: 0.0,
                        all_missing: true,
                    };
                }
                let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                // Imputed cells sit at the mean and add nothing to the sum of squares.
                let ss: f64 = observed.iter().map(|v| (v - mean).powi(2)).sum();
                let std = (ss / rows.len() as f64).sqrt();
                ColumnStats {
                    mean,
                    std,
                    all_missing: false,
                }
            })
            .collect();
        Self { stats }
    }

    pub fn fit_all(raw: &RawMatrix) -> Self {
        let rows: Vec<usize> = (0..raw.n_rows()).collect();
        Self::fit(raw, &rows)
    }

    #[inline]
    pub fn scale(&self, c: usize, v: Option<f64>) -> f64 {
        let s = &self.stats[c];
        match v {
            _ if s.all_missing || s.std < MIN_STD => 0.0,
            None => 0.0,
            Some(x) => (x - s.mean) / s.std,
        }
    }

    pub fn transform(&self, raw: &RawMatrix) -> Matrix {
        let (n, p) = (raw.n_rows(), raw.n_cols());
        assert_eq!(p, self.stats.len(), "standardizer width");
        let mut m = Matrix::zeros(n, p);
        for r in 0..n {
            for c in 0..p {
                m.set(r, c, self.scale(c, raw.get(r, c)));
            }
        }
        m
    }

    pub fn transform_row(&self, row: &[Option<f64>]) -> Vec<f64> {
        row.iter().enumerate().map(|(c, &v)| self.scale(c, v)).collect()
    }
}

/// Imputed and standardized predictors with their column descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub hours: Vec<HourIndex>,
    pub columns: Vec<ColumnDescriptor>,
    pub data: Matrix,
    pub standardizer: Standardizer,
}

impl FeatureMatrix {
    pub fn from_raw(raw: &RawMatrix) -> Self {
        let standardizer = Standardizer::fit_all(raw);
        Self {
            data: standardizer.transform(raw),
            hours: raw.hours.clone(),
            columns: raw.columns.clone(),
            standardizer,
        }
    }

    pub fn descriptor_hash(&self) -> String {
        descriptor_hash(&self.columns)
    }

    pub fn n_rows(&self) -> usize {
        self.data.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.n_cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    /// Number of lagged copies (lag 1..=lags hours) stacked after lag 0.
    pub lags: usize,
    pub calendar: bool,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            lags: 2,
            calendar: true,
        }
    }
}

fn check_contiguous(frames: &[SensorFrame], width: usize) -> Result<(), DatasetError> {
    for w in frames.windows(2) {
        if w[1].hour != w[0].hour + SECONDS_PER_HOUR {
            return Err(DatasetError::NotContiguous {
                previous: w[0].hour,
                found: w[1].hour,
            });
        }
    }
    if let Some(f) = frames.iter().find(|f| f.values.len() != width) {
        return Err(DatasetError::LayoutMismatch {
            expected: width,
            got: f.values.len(),
        });
    }
    Ok(())
}

/// Lagged design matrix before imputation. Column order: the lag-0 base
/// block, then one block per lag, then the calendar scalars. The first
/// `lags` frames only serve as history and produce no row.
pub fn build_raw_design(
    frames: &[SensorFrame],
    layout: &FrameLayout,
    calendar: &LocalCalendar,
    params: FeatureParams,
) -> Result<RawMatrix, DatasetError> {
    let base = layout.len();
    check_contiguous(frames, base)?;
    if frames.len() <= params.lags {
        return Err(DatasetError::TooFewFrames {
            lags: params.lags,
            got: frames.len(),
        });
    }
    let mut columns = Vec::new();
    for lag in 0..=params.lags {
        for (station, channel) in &layout.slots {
            columns.push(ColumnDescriptor::Sensor {
                station: station.clone(),
                channel: *channel,
                lag: lag as u8,
            });
        }
    }
    if params.calendar {
        columns.extend(CalendarField::ALL.map(ColumnDescriptor::Calendar));
    }
    let mut hours = Vec::with_capacity(frames.len() - params.lags);
    let mut values = Vec::with_capacity((frames.len() - params.lags) * columns.len());
    for t in params.lags..frames.len() {
        let h = calendar
            .hour_floor(frames[t].hour)
            .map_err(|_| DatasetError::BadRange)?;
        for lag in 0..=params.lags {
            values.extend_from_slice(&frames[t - lag].values);
        }
        if params.calendar {
            values.extend(CalendarField::ALL.iter().map(|f| Some(f.value(&h))));
        }
        hours.push(h);
    }
    Ok(RawMatrix::new(hours, columns, values))
}

/// [`build_raw_design`] followed by imputation and standardization over all rows.
pub fn build_x(
    frames: &[SensorFrame],
    layout: &FrameLayout,
    calendar: &LocalCalendar,
    params: FeatureParams,
) -> Result<FeatureMatrix, DatasetError> {
    let raw = build_raw_design(frames, layout, calendar, params)?;
    Ok(FeatureMatrix::from_raw(&raw))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelParams {
    /// Zip codes counted towards the score; empty means every zip code.
    pub region_set: Vec<ZipCode>,
    pub horizon_hours: i64,
    /// Only ratings strictly above this count.
    pub rating_floor: u8,
    /// Scores at or above this are smell events.
    pub threshold: u32,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            region_set: Vec::new(),
            horizon_hours: 8,
            rating_floor: 2,
            threshold: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLabel {
    pub hour: i64,
    pub score: u32,
    pub positive: bool,
}

/// Confidence score and class for each hour start in `hours`.
pub fn build_y(reports: &[SmellReport], hours: &[i64], params: &LabelParams) -> Vec<EventLabel> {
    let regions: BTreeSet<&ZipCode> = params.region_set.iter().collect();
    let mut events: Vec<(i64, u32)> = reports
        .iter()
        .filter(|r| r.rating.get() > params.rating_floor)
        .filter(|r| regions.is_empty() || regions.contains(&r.zip_code))
        .map(|r| (r.observed_at, r.rating.get() as u32))
        .collect();
    events.sort_unstable();
    let mut prefix = Vec::with_capacity(events.len() + 1);
    prefix.push(0u64);
    for (_, v) in &events {
        prefix.push(prefix.last().unwrap() + *v as u64);
    }
    let horizon = params.horizon_hours * SECONDS_PER_HOUR;
    hours
        .iter()
        .map(|&h| {
            let a = events.partition_point(|e| e.0 < h);
            let b = events.partition_point(|e| e.0 < h + horizon);
            let score = (prefix[b] - prefix[a]) as u32;
            EventLabel {
                hour: h,
                score,
                positive: score >= params.threshold,
            }
        })
        .collect()
}

/// Rows of `x` and `y` on common hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: RawMatrix,
    pub labels: Vec<EventLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| l.positive).count() as f64 / self.labels.len() as f64
    }

    pub fn classes(&self) -> Vec<u32> {
        self.labels.iter().map(|l| l.positive as u32).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.score as f64).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

pub fn align(x: RawMatrix, y: &[EventLabel]) -> Result<Dataset, DatasetError> {
    let by_hour: std::collections::HashMap<i64, EventLabel> = y.iter().map(|l| (l.hour, *l)).collect();
    let rows: Vec<usize> = (0..x.n_rows())
        .filter(|&r| by_hour.contains_key(&x.hours[r].hour_start))
        .collect();
    if rows.is_empty() {
        return Err(DatasetError::EmptyIntersection);
    }
    let x = x.select_rows(&rows);
    let labels = x.hours.iter().map(|h| by_hour[&h.hour_start]).collect();
    Ok(Dataset { x, labels })
}

/// Frames, lagged predictors and labels for every hour start in
/// `[first_hour, last_hour]`.
pub fn build_dataset(
    readings: &[SensorReading],
    reports: &[SmellReport],
    stations: &StationTable,
    calendar: &LocalCalendar,
    features: FeatureParams,
    labels: &LabelParams,
    first_hour: i64,
    last_hour: i64,
) -> Result<Dataset, DatasetError> {
    let layout = stations.layout();
    let frames = resample_range(readings, first_hour, last_hour, &layout)?;
    let raw = build_raw_design(&frames, &layout, calendar, features)?;
    let hours: Vec<i64> = raw.hours.iter().map(|h| h.hour_start).collect();
    let y = build_y(reports, &hours, labels);
    align(raw, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Rating, ReportId};

    fn station(id: &str, channels: &[Channel]) -> StationConfig {
        StationConfig {
            id: StationId(id.into()),
            channels: channels.to_vec(),
        }
    }

    fn reading(st: &str, ch: Channel, t: i64, v: Option<f64>) -> SensorReading {
        SensorReading {
            station_id: StationId(st.into()),
            channel: ch,
            observed_at: t,
            value: v,
        }
    }

    fn report(t: i64, rating: i64, zip: &str) -> SmellReport {
        SmellReport {
            report_id: ReportId(format!("{t}")),
            observed_at: t,
            zip_code: ZipCode::new(zip).unwrap(),
            rating: Rating::new(rating).unwrap(),
            smell_description: None,
            symptoms: None,
            notes: None,
            display_latitude: None,
            display_longitude: None,
        }
    }

    #[test]
    fn resample_mean_missing_and_wind() {
        let table = StationTable(vec![station("a", &[Channel::H2s, Channel::WindDirDeg])]);
        let layout = table.layout();
        assert_eq!(layout.len(), 3);
        let rs = vec![
            reading("a", Channel::H2s, 3600, Some(2.0)),
            reading("a", Channel::H2s, 3600, Some(4.0)),
            reading("a", Channel::WindDirDeg, 3600, Some(90.0)),
        ];
        let f = resample_hour(&rs, 7200, &layout);
        assert_eq!(f.values[0], Some(3.0));
        assert!(f.values[1].unwrap().abs() < 1e-15);
        assert!((f.values[2].unwrap() - 1.0).abs() < 1e-15);
        let empty = resample_hour(&rs, 3600, &layout);
        assert_eq!(empty.values, vec![None, None, None]);
    }

    #[test]
    fn circular_mean_avoids_wraparound() {
        let layout = StationTable(vec![station("a", &[Channel::WindDirDeg])]).layout();
        let rs = vec![
            reading("a", Channel::WindDirDeg, 0, Some(359.0)),
            reading("a", Channel::WindDirDeg, 0, Some(1.0)),
        ];
        let f = resample_hour(&rs, 3600, &layout);
        let (c, s) = (f.values[0].unwrap(), f.values[1].unwrap());
        assert!(s.abs() < 1e-12);
        assert!((c - 1f64.to_radians().cos()).abs() < 1e-12);
    }

    #[test]
    fn range_matches_per_hour() {
        let layout = StationTable(vec![
            station("a", &[Channel::H2s, Channel::WindDirDeg]),
            station("b", &[Channel::Pm]),
        ])
        .layout();
        let mut rs = Vec::new();
        for k in 0..30i64 {
            rs.push(reading("a", Channel::H2s, k * 3600, Some(k as f64)));
            if k % 3 != 0 {
                rs.push(reading("a", Channel::WindDirDeg, k * 3600, Some((k * 37 % 360) as f64)));
            }
            if k % 2 == 0 {
                rs.push(reading("b", Channel::Pm, k * 3600, Some(0.5 * k as f64)));
            }
        }
        let frames = resample_range(&rs, 3600, 20 * 3600, &layout).unwrap();
        for f in &frames {
            assert_eq!(*f, resample_hour(&rs, f.hour, &layout));
        }
    }

    #[test]
    fn column_count_for_64_base_channels() {
        // 8 stations x (PM, SO2, CO, NOx, O3, H2S, wind dir -> 2) = 64 slots.
        let st: Vec<StationConfig> = (0..8)
            .map(|i| {
                station(
                    &format!("s{i}"),
                    &[
                        Channel::Pm,
                        Channel::So2,
                        Channel::Co,
                        Channel::Nox,
                        Channel::O3,
                        Channel::H2s,
                        Channel::WindDirDeg,
                    ],
                )
            })
            .collect();
        let layout = StationTable(st).layout();
        assert_eq!(layout.len(), 64);
        let frames: Vec<SensorFrame> = (0..5)
            .map(|k| SensorFrame {
                hour: (k + 1) * 3600,
                values: vec![Some(k as f64); 64],
            })
            .collect();
        let x = build_x(&frames, &layout, &LocalCalendar::default(), FeatureParams::default()).unwrap();
        assert_eq!(x.n_cols(), 195);
        assert_eq!(x.n_rows(), 3);
    }

    #[test]
    fn constant_and_all_missing_columns_become_zero() {
        let layout = StationTable(vec![station("a", &[Channel::Pm, Channel::So2])]).layout();
        let frames: Vec<SensorFrame> = (0..6)
            .map(|k| SensorFrame {
                hour: (k + 1) * 3600,
                values: vec![Some(7.0), None],
            })
            .collect();
        let x = build_x(
            &frames,
            &layout,
            &LocalCalendar::default(),
            FeatureParams {
                lags: 0,
                calendar: false,
            },
        )
        .unwrap();
        assert!(x.data.as_slice().iter().all(|&v| v == 0.0));
        assert!(x.standardizer.stats[1].all_missing);
        assert!(!x.standardizer.stats[0].all_missing);
    }

    #[test]
    fn non_contiguous_frames_rejected() {
        let layout = StationTable(vec![station("a", &[Channel::Pm])]).layout();
        let frames = vec![
            SensorFrame {
                hour: 3600,
                values: vec![None],
            },
            SensorFrame {
                hour: 10800,
                values: vec![None],
            },
        ];
        assert!(matches!(
            build_raw_design(
                &frames,
                &layout,
                &LocalCalendar::default(),
                FeatureParams {
                    lags: 0,
                    calendar: false
                }
            ),
            Err(DatasetError::NotContiguous { .. })
        ));
    }

    #[test]
    fn labels_sum_window_and_filter() {
        let p = LabelParams {
            region_set: vec![ZipCode::new("15213").unwrap()],
            ..LabelParams::default()
        };
        let h = 36_000;
        assert_eq!(build_y(&[], &[h], &p)[0].score, 0);
        assert!(!build_y(&[], &[h], &p)[0].positive);

        let fourteen: Vec<SmellReport> = (0..14).map(|i| report(h + i * 600, 3, "15213")).collect();
        let l = build_y(&fourteen, &[h], &p)[0];
        assert_eq!((l.score, l.positive), (42, true));

        let outside: Vec<SmellReport> = (0..10).map(|i| report(h + i, 5, "15217")).collect();
        assert_eq!(build_y(&outside, &[h], &p)[0].score, 0);

        // Window is [h, h + 8h): a report exactly at h + 8h is excluded,
        // and ratings at the floor are ignored.
        let edge = vec![
            report(h + 8 * 3600, 5, "15213"),
            report(h, 2, "15213"),
            report(h, 5, "15213"),
        ];
        assert_eq!(build_y(&edge, &[h], &p)[0].score, 5);
    }

    #[test]
    fn threshold_boundary_inclusive() {
        let p = LabelParams::default();
        let at: Vec<SmellReport> = (0..8).map(|i| report(i, 5, "15213")).collect();
        assert!(build_y(&at, &[0], &p)[0].positive);
        let below: Vec<SmellReport> = (0..13).map(|i| report(i, 3, "15213")).collect();
        assert!(!build_y(&below, &[0], &p)[0].positive);
    }

    #[test]
    fn align_intersects_hours() {
        let layout = StationTable(vec![station("a", &[Channel::Pm])]).layout();
        let frames: Vec<SensorFrame> = (0..100)
            .map(|k| SensorFrame {
                hour: (k + 1) * 3600,
                values: vec![Some(k as f64)],
            })
            .collect();
        let cal = LocalCalendar::default();
        let fp = FeatureParams {
            lags: 0,
            calendar: false,
        };
        let raw = build_raw_design(&frames, &layout, &cal, fp).unwrap();
        let hours: Vec<i64> = frames.iter().map(|f| f.hour).collect();
        let y = build_y(&[], &hours, &LabelParams::default());
        assert_eq!(align(raw.clone(), &y).unwrap().len(), 100);
        let far: Vec<i64> = hours.iter().map(|h| h + 1_000_000 * 3600).collect();
        let y2 = build_y(&[], &far, &LabelParams::default());
        assert_eq!(align(raw, &y2).unwrap_err(), DatasetError::EmptyIntersection);
    }
}
