//! Usage analytics: user-group segmentation, n-gram counts over report text
//! and the day-of-week by hour-of-day rating grid.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{InteractionEvent, InteractionKind, LocalCalendar, SmellReport, SECONDS_PER_HOUR};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no users with at least one report or interaction")]
    EmptyPopulation,
    #[error("n-gram order must be 1 or 2, got {0}")]
    NgramOrder(usize),
}

// ---------------------------------------------------------------- quantiles

/// Linear-interpolation quantile (the R-7 / numpy default) of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Median and semi-interquartile range `(Q3 - Q1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianSiqr {
    pub median: f64,
    pub siqr: f64,
    pub n: usize,
}

impl MedianSiqr {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.into_iter().collect();
        v.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&v, 0.25)?;
        let q3 = quantile_sorted(&v, 0.75)?;
        Some(Self {
            median: quantile_sorted(&v, 0.5)?,
            siqr: (q3 - q1) / 2.0,
            n: v.len(),
        })
    }

    pub fn cut(&self) -> f64 {
        self.median + self.siqr
    }

    /// "16±8" style, rounded to integers.
    pub fn display(&self) -> String {
        format!("{}±{}", self.median.round(), self.siqr.round())
    }
}

// ---------------------------------------------------------------- segmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UserGroup {
    Enthusiast,
    Explorer,
    Contributor,
    Observer,
}

impl UserGroup {
    pub const ALL: [UserGroup; 4] = [
        UserGroup::Enthusiast,
        UserGroup::Explorer,
        UserGroup::Contributor,
        UserGroup::Observer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UserGroup::Enthusiast => "ENTHUSIAST",
            UserGroup::Explorer => "EXPLORER",
            UserGroup::Contributor => "CONTRIBUTOR",
            UserGroup::Observer => "OBSERVER",
        }
    }
}

/// Per-user activity. `report_chars` has one entry per report and
/// `hours_diff` one entry per data-viewing event.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserActivity {
    pub user: String,
    pub reports: u64,
    pub events: u64,
    pub report_chars: Vec<usize>,
    pub hours_diff: Vec<f64>,
}

impl UserActivity {
    pub fn counts(user: impl Into<String>, reports: u64, events: u64) -> Self {
        Self {
            user: user.into(),
            reports,
            events,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.reports > 0 || self.events > 0
    }
}

/// Builds activity from the interaction log. A REPORT_SUBMIT event counts
/// as one report by that user; its `data_at` names the submitted report's
/// `observed_at`, which is how text length is attributed. Every other kind
/// is an interaction event, and viewing kinds with a `data_at` contribute
/// `|hit - data|` in hours.
pub fn activity_from_log(interactions: &[InteractionEvent], reports: &[SmellReport]) -> Vec<UserActivity> {
    let mut chars_at: HashMap<i64, Vec<usize>> = HashMap::new();
    for r in reports {
        chars_at.entry(r.observed_at).or_default().push(r.text_characters());
    }
    let mut users: BTreeMap<&str, UserActivity> = BTreeMap::new();
    for e in interactions {
        let u = users.entry(e.anon_user_id.as_str()).or_insert_with(|| UserActivity {
            user: e.anon_user_id.clone(),
            ..UserActivity::default()
        });
        if e.kind == InteractionKind::ReportSubmit {
            u.reports += 1;
            if let Some(c) = e.data_at.and_then(|t| chars_at.get_mut(&t)).and_then(|v| v.pop()) {
                u.report_chars.push(c);
            }
        } else {
            u.events += 1;
            if let (true, Some(d)) = (e.kind.views_data(), e.data_at) {
                u.hours_diff.push((e.hit_at - d).abs() as f64 / SECONDS_PER_HOUR as f64);
            }
        }
    }
    users.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuts {
    pub report_cut: f64,
    pub event_cut: f64,
}

impl Cuts {
    pub fn classify(&self, reports: u64, events: u64) -> Option<UserGroup> {
        Some(if reports as f64 > self.report_cut && events as f64 > self.event_cut {
            UserGroup::Enthusiast
        } else if reports >= 1 && events == 0 {
            UserGroup::Contributor
        } else if events >= 1 && reports == 0 {
            UserGroup::Observer
        } else if reports >= 1 || events >= 1 {
            UserGroup::Explorer
        } else {
            return None;
        })
    }
}

/// One Table-1 row: group shares of users, reports, characters and events,
/// in percent of the active population's totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShare {
    pub group: UserGroup,
    pub users: usize,
    pub users_pct: f64,
    pub reports_pct: f64,
    pub characters_pct: f64,
    pub events_pct: f64,
}

/// One Table-2 row; `None` where the group has no such data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// `None` is the all-users row.
    pub group: Option<UserGroup>,
    pub reports_per_user: Option<MedianSiqr>,
    pub chars_per_report: Option<MedianSiqr>,
    pub events_per_user: Option<MedianSiqr>,
    pub hours_diff_per_event: Option<MedianSiqr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub users: usize,
    pub reports: u64,
    pub characters: u64,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub cuts: Cuts,
    pub assignment: Vec<(String, UserGroup)>,
    pub shares: Vec<GroupShare>,
    pub stats: Vec<GroupStats>,
    pub totals: Totals,
    /// Reports vs events among enthusiasts.
    pub enthusiast_correlation: Option<Pearson>,
}

impl Segmentation {
    pub fn group_of(&self, user: &str) -> Option<UserGroup> {
        self.assignment.iter().find(|(u, _)| u == user).map(|&(_, g)| g)
    }
}

/// Median+SIQR cuts over the active users.
pub fn cuts_for(users: &[UserActivity]) -> Result<Cuts, AnalyticsError> {
    let active: Vec<&UserActivity> = users.iter().filter(|u| u.is_active()).collect();
    if active.is_empty() {
        return Err(AnalyticsError::EmptyPopulation);
    }
    let r = MedianSiqr::of(active.iter().map(|u| u.reports as f64)).expect("non-empty");
    let e = MedianSiqr::of(active.iter().map(|u| u.events as f64)).expect("non-empty");
    Ok(Cuts {
        report_cut: r.cut(),
        event_cut: e.cut(),
    })
}

fn pct(part: f64, whole: f64) -> f64 {
    if whole > 0.0 {
        100.0 * part / whole
    } else {
        0.0
    }
}

/// Pearson r with the two-sided t-test p value (df n-2).
pub fn pearson(x: &[f64], y: &[f64]) -> Option<Pearson> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let n = x.len().min(y.len());
    if n < 3 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Some(Pearson { r, p_value, n })
}

pub fn segment_users(users: &[UserActivity]) -> Result<Segmentation, AnalyticsError> {
    let cuts = cuts_for(users)?;
    let active: Vec<(&UserActivity, UserGroup)> = users
        .iter()
        .filter_map(|u| cuts.classify(u.reports, u.events).map(|g| (u, g)))
        .collect();

    let chars = |u: &UserActivity| u.report_chars.iter().map(|&c| c as u64).sum::<u64>();
    let totals = Totals {
        users: active.len(),
        reports: active.iter().map(|(u, _)| u.reports).sum(),
        characters: active.iter().map(|(u, _)| chars(u)).sum(),
        events: active.iter().map(|(u, _)| u.events).sum(),
    };

    let stats_of = |group: Option<UserGroup>, members: &[&UserActivity]| GroupStats {
        group,
        reports_per_user: MedianSiqr::of(members.iter().filter(|u| u.reports > 0).map(|u| u.reports as f64)),
        chars_per_report: MedianSiqr::of(members.iter().flat_map(|u| u.report_chars.iter().map(|&c| c as f64))),
        events_per_user: MedianSiqr::of(members.iter().filter(|u| u.events > 0).map(|u| u.events as f64)),
        hours_diff_per_event: MedianSiqr::of(members.iter().flat_map(|u| u.hours_diff.iter().copied())),
    };

    let mut shares = Vec::new();
    let mut stats = Vec::new();
    for g in UserGroup::ALL {
        let members: Vec<&UserActivity> = active.iter().filter(|(_, h)| *h == g).map(|(u, _)| *u).collect();
        shares.push(GroupShare {
            group: g,
            users: members.len(),
            users_pct: pct(members.len() as f64, totals.users as f64),
            reports_pct: pct(
                members.iter().map(|u| u.reports).sum::<u64>() as f64,
                totals.reports as f64,
            ),
            characters_pct: pct(
                members.iter().map(|u| chars(u)).sum::<u64>() as f64,
                totals.characters as f64,
            ),
            events_pct: pct(
                members.iter().map(|u| u.events).sum::<u64>() as f64,
                totals.events as f64,
            ),
        });
        stats.push(stats_of(Some(g), &members));
    }
    let everyone: Vec<&UserActivity> = active.iter().map(|(u, _)| *u).collect();
    stats.push(stats_of(None, &everyone));

    let (er, ee): (Vec<f64>, Vec<f64>) = active
        .iter()
        .filter(|(_, g)| *g == UserGroup::Enthusiast)
        .map(|(u, _)| (u.reports as f64, u.events as f64))
        .unzip();
    let seg = Segmentation {
        cuts,
        assignment: active.iter().map(|(u, g)| (u.user.clone(), *g)).collect(),
        shares,
        stats,
        totals,
        enthusiast_correlation: pearson(&er, &ee),
    };
    log::info!(
        "segmented {} users with cuts reports > {} and events > {}",
        seg.totals.users,
        seg.cuts.report_cut,
        seg.cuts.event_cut
    );
    Ok(seg)
}

/// Table-1 CSV: group, users %, reports %, characters %, events %, users.
pub fn shares_csv(seg: &Segmentation) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "group",
        "users_pct",
        "reports_pct",
        "characters_pct",
        "events_pct",
        "users",
    ])
    .expect("in-memory");
    for s in &seg.shares {
        w.write_record([
            s.group.as_str().to_string(),
            format!("{:.1}", s.users_pct),
            format!("{:.1}", s.reports_pct),
            format!("{:.1}", s.characters_pct),
            format!("{:.1}", s.events_pct),
            s.users.to_string(),
        ])
        .expect("in-memory");
    }
    let t = &seg.totals;
    w.write_record([
        "SIZE".to_string(),
        t.users.to_string(),
        t.reports.to_string(),
        t.characters.to_string(),
        t.events.to_string(),
        t.users.to_string(),
    ])
    .expect("in-memory");
    w.into_inner().expect("in-memory")
}

/// Table-2 CSV of median±SIQR cells, empty where a group has no data.
pub fn stats_csv(seg: &Segmentation) -> Vec<u8> {
    let cell = |m: &Option<MedianSiqr>| m.as_ref().map(MedianSiqr::display).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "group",
        "reports_per_user",
        "chars_per_report",
        "events_per_user",
        "hours_diff_per_event",
    ])
    .expect("in-memory");
    for s in &seg.stats {
        w.write_record([
            s.group.map_or("ALL", UserGroup::as_str).to_string(),
            cell(&s.reports_per_user),
            cell(&s.chars_per_report),
            cell(&s.events_per_user),
            cell(&s.hours_diff_per_event),
        ])
        .expect("in-memory");
    }
    w.into_inner().expect("in-memory")
}

// ---------------------------------------------------------------- n-grams

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// The shipped English list, normalized by the same tokenizer, so "don't"
/// contributes "don" and "t".
pub fn default_stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_EN.lines().flat_map(tokenize).collect())
}

/// Gram counts sorted by count descending, then lexicographically. Stopwords
/// are removed before grams are formed.
pub fn ngram_frequency<S: AsRef<str>>(
    texts: &[S],
    n: usize,
    stopwords: &HashSet<String>,
) -> Result<Vec<(String, usize)>, AnalyticsError> {
    if !(1..=2).contains(&n) {
        return Err(AnalyticsError::NgramOrder(n));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        let toks: Vec<String> = tokenize(t.as_ref())
            .into_iter()
            .filter(|w| !stopwords.contains(w))
            .collect();
        for g in toks.windows(n) {
            *counts.entry(g.join(" ")).or_default() += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Free text of every report, one string per non-empty field.
pub fn report_texts(reports: &[SmellReport]) -> Vec<String> {
    reports
        .iter()
        .flat_map(|r| [r.smell_description.as_deref(), r.symptoms.as_deref(), r.user_notes()])
        .flatten()
        .filter(|s| !s.trim().is_empty())
        .map(str::to_string)
        .collect()
}

pub fn ngram_csv(grams: &[(String, usize)]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["gram", "count"]).expect("in-memory");
    for (g, c) in grams {
        w.write_record([g.as_str(), &c.to_string()]).expect("in-memory");
    }
    w.into_inner().expect("in-memory")
}

// ---------------------------------------------------------------- heatmap

/// Mean rating by local day of week (Monday = 0) and hour of day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub cells: [[Option<f64>; 24]; 7],
    pub counts: [[usize; 24]; 7],
}

impl Heatmap {
    pub fn get(&self, day: usize, hour: usize) -> Option<f64> {
        self.cells[day][hour]
    }
}

pub fn temporal_heatmap(reports: &[SmellReport], calendar: &LocalCalendar) -> Heatmap {
    let mut sums = [[0.0f64; 24]; 7];
    let mut counts = [[0usize; 24]; 7];
    for r in reports {
        let (d, h) = calendar.day_hour(r.observed_at);
        sums[d as usize][h as usize] += r.rating.get() as f64;
        counts[d as usize][h as usize] += 1;
    }
    let mut cells = [[None; 24]; 7];
    for d in 0..7 {
        for h in 0..24 {
            if counts[d][h] > 0 {
                cells[d][h] = Some(sums[d][h] / counts[d][h] as f64);
            }
        }
    }
    Heatmap { cells, counts }
}

const DAY_NAMES: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// Long format: day, hour, mean rating (empty when missing), count.
pub fn heatmap_csv(h: &Heatmap) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["day_of_week", "hour", "mean_rating", "count"])
        .expect("in-memory");
    for d in 0..7 {
        for hr in 0..24 {
            w.write_record([
                DAY_NAMES[d].to_string(),
                hr.to_string(),
                h.cells[d][hr].map(|v| format!("{v:.4}")).unwrap_or_default(),
                h.counts[d][hr].to_string(),
            ])
            .expect("in-memory");
        }
    }
    w.into_inner().expect("in-memory")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.25), Some(1.75));
        assert_eq!(quantile_sorted(&v, 0.5), Some(2.5));
        let m = MedianSiqr::of(v).unwrap();
        assert_eq!(m.siqr, 0.75);
    }

    #[test]
    fn small_groups() {
        let users = vec![
            UserActivity::counts("a", 0, 5),
            UserActivity::counts("b", 3, 0),
            UserActivity::counts("c", 1, 1),
            UserActivity::counts("z", 0, 0),
        ];
        let s = segment_users(&users).unwrap();
        assert_eq!(s.group_of("a"), Some(UserGroup::Observer));
        assert_eq!(s.group_of("b"), Some(UserGroup::Contributor));
        assert_eq!(s.group_of("z"), None);
        assert_eq!(s.totals.users, 3);
        assert_eq!(segment_users(&[]).unwrap_err(), AnalyticsError::EmptyPopulation);
    }

    #[test]
    fn stopwords_drop_entirely() {
        let sw = default_stopwords();
        assert!(sw.contains("the") && sw.contains("don"));
        assert!(ngram_frequency(&["The and of it"], 1, sw).unwrap().is_empty());
        let g = ngram_frequency(&["rotten egg", "rotten egg smell"], 2, sw).unwrap();
        assert_eq!(g[0], ("rotten egg".to_string(), 2));
        assert_eq!(g[1], ("egg smell".to_string(), 1));
    }
}
