//! Synthetic smell-event benchmark.
//!
//! Latent hourly signals drive both the sensor readings and the planted truth:
//! the hour starting at `h` is a smell event exactly when the latent
//! north-south wind component at Lawrenceville is positive and the latent
//! Liberty H2S exceeds a threshold calibrated to the target positive rate.
//! Sensors observe the latent signals through measurement noise whose scale
//! is calibrated so that the same rule applied to the observed readings
//! disagrees with the planted labels on the target fraction of hours.
//! Smell reports are then synthesized so the label builder reproduces the
//! planted labels exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_dataset, wind_components, Dataset, DatasetError, FeatureParams, LabelParams, StationConfig, StationTable,
};
use crate::domain::{
    Channel, LocalCalendar, Rating, ReportId, SensorReading, SmellReport, StationId, ZipCode, SECONDS_PER_HOUR,
};

const AH: f64 = 0.08;
const PEAK_WIDTH_H: f64 = 1.5;
/// Wind vane noise; the calibrated noise budget goes to the H2S sensor.
const WIND_NOISE_DEG: f64 = 5.0;
pub const LIBERTY: &str = "liberty";
pub const LAWRENCEVILLE: &str = "lawrenceville";
pub const PARKWAY: &str = "parkway";

pub const ZIP_CODES: [&str; 8] = ["15201", "15206", "15207", "15213", "15217", "15218", "15221", "15224"];

const EVENT_WORDS: [&str; 8] = [
    "rotten egg",
    "rotten egg smell",
    "sulfur",
    "industrial smell",
    "smells like rotten eggs",
    "sewage",
    "coke oven smell",
    "burning coal",
];
const BACKGROUND_WORDS: [&str; 5] = ["fresh air", "wood smoke", "slight exhaust", "fine", "cut grass"];
const SYMPTOMS: [&str; 4] = ["headache", "nausea", "coughing", "eye irritation"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("report placement is infeasible for the planted labels")]
    Infeasible,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Epoch seconds of the first reading; floored to the hour.
    pub start: i64,
    pub hours: usize,
    pub positive_rate: f64,
    /// Target fraction of hours where the rule on observed readings
    /// disagrees with the planted label.
    pub disagreement: f64,
    /// Chance that a reading of a non-signal channel is missing.
    pub missing_rate: f64,
    /// Mean count of rating 1-2 reports per hour; they never affect labels.
    pub background_reports_per_hour: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            // 2017-01-01 00:00 America/New_York
            start: 1_483_246_800,
            hours: 2 * 365 * 24,
            positive_rate: 0.08,
            disagreement: 0.05,
            missing_rate: 0.005,
            background_reports_per_hour: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub stations: StationTable,
    pub readings: Vec<SensorReading>,
    pub reports: Vec<SmellReport>,
    /// `(sample hour start, planted label)`; a sample at `h` sees readings from `[h - 1h, h)`.
    pub planted: Vec<(i64, bool)>,
    pub h2s_threshold: f64,
    /// H2S noise found by calibration, as a multiple of the latent H2S std.
    pub noise_scale: f64,
    /// Achieved rule disagreement on the observed readings.
    pub disagreement: f64,
}

pub fn station_table() -> StationTable {
    let st = |id: &str, ch: &[Channel]| StationConfig {
        id: StationId(id.into()),
        channels: ch.to_vec(),
    };
    StationTable(vec![
        st(LIBERTY, &[Channel::H2s, Channel::So2, Channel::Pm]),
        st(
            LAWRENCEVILLE,
            &[
                Channel::WindDirDeg,
                Channel::WindSpeed,
                Channel::WindDirStd,
                Channel::O3,
                Channel::Pm,
            ],
        ),
        st(PARKWAY, &[Channel::Pm, Channel::Co, Channel::Nox]),
    ])
}

struct Latent {
    wind_deg: Vec<f64>,
    h2s: Vec<f64>,
    others: Vec<[f64; 8]>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn latent(cfg: &SyntheticConfig, cal: &LocalCalendar, rng: &mut ChaCha8Rng) -> Latent {
    let n = cfg.hours;
    let day_amp = LogNormal::new(0.0, 0.6).expect("valid lognormal");
    let mut regime_north = rng.random_bool(0.5);
    let (mut aw, mut ah) = (0.0f64, 0.0f64);
    let mut ao = [0.0f64; 8];
    let mut amp = day_amp.sample(rng);
    let mut out = Latent {
        wind_deg: Vec::with_capacity(n),
        h2s: Vec::with_capacity(n),
        others: Vec::with_capacity(n),
    };
    for t in 0..n {
        let at = cfg.start + t as i64 * SECONDS_PER_HOUR;
        let lh = cal.local_hour(at) as f64;
        if lh == 0.0 {
            amp = day_amp.sample(rng);
        }
        if rng.random_bool(1.0 / 36.0) {
            regime_north = !regime_north;
        }
        aw = 0.9 * aw + 6.0 * normal(rng);
        let center = if regime_north { 20.0 } else { 200.0 };
        out.wind_deg.push((center + aw).rem_euclid(360.0));
        ah = 0.95 * ah + AH * normal(rng);
        let peak = 2.0 * amp * (-(lh - 7.0).powi(2) / (2.0 * PEAK_WIDTH_H * PEAK_WIDTH_H)).exp();
        out.h2s.push((0.5 + peak + ah).max(0.0));
        for a in ao.iter_mut() {
            *a = 0.97 * *a + 0.25 * normal(rng);
        }
        let diurnal = (std::f64::consts::TAU * (lh - 14.0) / 24.0).cos();
        out.others.push([
            (2.5 + 0.8 * ao[0]).max(0.0),                   // wind speed
            (25.0 + 8.0 * ao[1]).max(0.0),                  // wind direction std
            (30.0 + 12.0 * diurnal + 6.0 * ao[2]).max(0.0), // O3
            (10.0 + 4.0 * ao[3]).max(0.0),                  // PM lawrenceville
            (3.0 + 1.5 * ao[4]).max(0.0),                   // SO2
            (12.0 + 5.0 * ao[5]).max(0.0),                  // PM liberty
            (0.4 + 0.15 * ao[6]).max(0.0),                  // CO
            (15.0 + 6.0 * ao[7] - 4.0 * diurnal).max(0.0),  // NOx
        ]);
    }
    out
}

fn rule(wind_deg: f64, h2s: f64, thr: f64) -> bool {
    wind_components(wind_deg).0 > 0.0 && h2s > thr
}

fn calibrate_threshold(l: &Latent, rate: f64) -> f64 {
    let mut north: Vec<f64> = l
        .wind_deg
        .iter()
        .zip(&l.h2s)
        .filter(|(d, _)| wind_components(**d).0 > 0.0)
        .map(|(_, h)| *h)
        .collect();
    north.sort_by(|a, b| b.total_cmp(a));
    let k = ((rate * l.h2s.len() as f64).round() as usize).clamp(1, north.len().max(1));
    if north.len() <= k {
        return north.last().copied().unwrap_or(0.0) - 1.0;
    }
    0.5 * (north[k - 1] + north[k])
}

fn observed(l: &Latent, z: &[(f64, f64)], scale: f64, sd_h2s: f64) -> (Vec<f64>, Vec<f64>) {
    let dir = l
        .wind_deg
        .iter()
        .zip(z)
        .map(|(d, (zw, _))| (d + WIND_NOISE_DEG * zw).rem_euclid(360.0))
        .collect();
    let h2s = l
        .h2s
        .iter()
        .zip(z)
        .map(|(h, (_, zh))| (h + scale * sd_h2s * zh).max(0.0))
        .collect();
    (dir, h2s)
}

fn disagreement(labels: &[bool], dir: &[f64], h2s: &[f64], thr: f64) -> f64 {
    let bad = (0..labels.len())
        .filter(|&t| rule(dir[t], h2s[t], thr) != labels[t])
        .count();
    bad as f64 / labels.len().max(1) as f64
}

/// Non-negative report counts per hour such that every 8-hour forward window
/// holds at least `pos` counts where `labels` is true and at most `neg`
/// counts where it is false. Solved as difference constraints on prefix sums.
pub fn solve_report_counts(labels: &[bool], horizon: usize, pos: i64, neg: i64) -> Option<Vec<i64>> {
    let n = labels.len() + horizon;
    // x[k] = counts in hours [0, k); shortest-path potentials, all start at 0.
    let mut x = vec![0i64; n + 1];
    for _ in 0..=n {
        let mut changed = false;
        // Monotone prefix: x[k] <= x[k + 1], and x[t] <= x[t + horizon] - pos.
        for k in (0..n).rev() {
            if x[k + 1] < x[k] {
                x[k] = x[k + 1];
                changed = true;
            }
            if k < labels.len() && labels[k] && x[k + horizon] - pos < x[k] {
                x[k] = x[k + horizon] - pos;
                changed = true;
            }
        }
        // x[t + horizon] <= x[t] + neg.
        for (t, &l) in labels.iter().enumerate() {
            if !l && x[t] + neg < x[t + horizon] {
                x[t + horizon] = x[t] + neg;
                changed = true;
            }
        }
        if !changed {
            return Some((0..n).map(|k| x[k + 1] - x[k]).collect());
        }
    }
    None
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark, SynthError> {
    if cfg.hours < 24 || !(cfg.positive_rate > 0.0 && cfg.positive_rate < 0.5) {
        return Err(SynthError::Config(
            "need at least a day and a positive rate in (0, 0.5)".into(),
        ));
    }
    let cal = LocalCalendar::default();
    let start = cfg.start - cfg.start.rem_euclid(SECONDS_PER_HOUR);
    let cfg = SyntheticConfig { start, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lat = latent(&cfg, &cal, &mut rng);
    let thr = calibrate_threshold(&lat, cfg.positive_rate);
    let labels: Vec<bool> = (0..cfg.hours).map(|t| rule(lat.wind_deg[t], lat.h2s[t], thr)).collect();

    let z: Vec<(f64, f64)> = (0..cfg.hours).map(|_| (normal(&mut rng), normal(&mut rng))).collect();
    let mean_h = lat.h2s.iter().sum::<f64>() / cfg.hours as f64;
    let sd_h2s = (lat.h2s.iter().map(|h| (h - mean_h).powi(2)).sum::<f64>() / cfg.hours as f64).sqrt();
    let (mut lo, mut hi) = (0.0f64, 4.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let (d, h) = observed(&lat, &z, mid, sd_h2s);
        if disagreement(&labels, &d, &h, thr) < cfg.disagreement {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = 0.5 * (lo + hi);
    let (obs_dir, obs_h2s) = observed(&lat, &z, scale, sd_h2s);
    let achieved = disagreement(&labels, &obs_dir, &obs_h2s, thr);

    let mut readings = Vec::with_capacity(cfg.hours * 11);
    let sid = |s: &str| StationId(s.into());
    for t in 0..cfg.hours {
        let at = start + t as i64 * SECONDS_PER_HOUR;
        let o = &lat.others[t];
        let mut push = |st: &str, ch: Channel, v: f64, can_miss: bool, rng: &mut ChaCha8Rng| {
            let missing = can_miss && rng.random_bool(cfg.missing_rate);
            readings.push(SensorReading {
                station_id: sid(st),
                channel: ch,
                observed_at: at,
                value: (!missing).then_some(v),
            });
        };
        push(LIBERTY, Channel::H2s, obs_h2s[t], false, &mut rng);
        push(LIBERTY, Channel::So2, o[4], true, &mut rng);
        push(LIBERTY, Channel::Pm, o[5], true, &mut rng);
        push(LAWRENCEVILLE, Channel::WindDirDeg, obs_dir[t], false, &mut rng);
        push(LAWRENCEVILLE, Channel::WindSpeed, o[0], true, &mut rng);
        push(LAWRENCEVILLE, Channel::WindDirStd, o[1], true, &mut rng);
        push(LAWRENCEVILLE, Channel::O3, o[2], true, &mut rng);
        push(LAWRENCEVILLE, Channel::Pm, o[3], true, &mut rng);
        push(PARKWAY, Channel::Pm, o[5] * 0.8 + o[3] * 0.2, true, &mut rng);
        push(PARKWAY, Channel::Co, o[6], true, &mut rng);
        push(PARKWAY, Channel::Nox, o[7], true, &mut rng);
    }

    // Sample t starts one hour after its reading.
    let lp = LabelParams::default();
    let per_report = 5i64;
    let pos = (lp.threshold as i64 + per_report - 1) / per_report;
    let counts = solve_report_counts(&labels, lp.horizon_hours as usize, pos, pos - 1).ok_or(SynthError::Infeasible)?;
    let mut reports = Vec::new();
    let mut ordinal = 0u64;
    let mut report = |at: i64, rating: i64, rng: &mut ChaCha8Rng, reports: &mut Vec<SmellReport>| {
        let event = rating > 2;
        let words: &[&str] = if event { &EVENT_WORDS } else { &BACKGROUND_WORDS };
        ordinal += 1;
        reports.push(SmellReport {
            report_id: ReportId(format!("syn-{:08}", ordinal)),
            observed_at: at,
            zip_code: ZipCode::new(ZIP_CODES[rng.random_range(0..ZIP_CODES.len())]).expect("static zip"),
            rating: Rating::new(rating).expect("static rating"),
            smell_description: rng
                .random_bool(0.8)
                .then(|| words[rng.random_range(0..words.len())].to_string()),
            symptoms: (event && rng.random_bool(0.3))
                .then(|| SYMPTOMS[rng.random_range(0..SYMPTOMS.len())].to_string()),
            notes: None,
            display_latitude: None,
            display_longitude: None,
        });
    };
    for (k, &c) in counts.iter().enumerate() {
        let hour = start + (k as i64 + 1) * SECONDS_PER_HOUR;
        for _ in 0..c {
            report(hour + rng.random_range(0..SECONDS_PER_HOUR), 5, &mut rng, &mut reports);
        }
        let bg = cfg.background_reports_per_hour;
        let mut nb = bg.floor() as usize;
        if rng.random_bool(bg.fract()) {
            nb += 1;
        }
        for _ in 0..nb {
            let r = rng.random_range(1..=2);
            report(hour + rng.random_range(0..SECONDS_PER_HOUR), r, &mut rng, &mut reports);
        }
    }
    reports.sort_by_key(|r| r.observed_at);

    let planted = labels
        .iter()
        .enumerate()
        .map(|(t, &l)| (start + (t as i64 + 1) * SECONDS_PER_HOUR, l))
        .collect();
    Ok(SyntheticBenchmark {
        config: cfg,
        stations: station_table(),
        readings,
        reports,
        planted,
        h2s_threshold: thr,
        noise_scale: scale,
        disagreement: achieved,
    })
}

impl SyntheticBenchmark {
    pub fn first_sample_hour(&self) -> i64 {
        self.planted.first().map_or(0, |p| p.0)
    }

    pub fn last_sample_hour(&self) -> i64 {
        self.planted.last().map_or(0, |p| p.0)
    }

    pub fn positive_rate(&self) -> f64 {
        self.planted.iter().filter(|p| p.1).count() as f64 / self.planted.len().max(1) as f64
    }

    /// Predictors and labels through the regular dataset builder.
    pub fn dataset(&self, features: FeatureParams) -> Result<Dataset, SynthError> {
        Ok(build_dataset(
            &self.readings,
            &self.reports,
            &self.stations,
            &LocalCalendar::default(),
            features,
            &LabelParams::default(),
            self.first_sample_hour(),
            self.last_sample_hour(),
        )?)
    }
}
