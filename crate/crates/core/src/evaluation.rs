//! Event-overlap scoring and rolling-origin cross-validation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{descriptor_hash, Dataset, EventLabel, Standardizer};
use crate::domain::{LocalCalendar, SECONDS_PER_HOUR};
use crate::ensemble::{fit_forest, EnsembleError, ForestModel, ForestParams, MaxFeatures, Target, Task};
use crate::matrix::Matrix;

/// Inclusive index range of a maximal run of positive samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInterval {
    pub start: usize,
    pub end: usize,
}

pub fn merge_events(series: &[bool]) -> Vec<EventInterval> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &v) in series.iter().enumerate() {
        match (v, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push(EventInterval { start: s, end: i - 1 });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push(EventInterval {
            start: s,
            end: series.len() - 1,
        });
    }
    out
}

/// Like [`merge_events`] over timestamped samples; a gap of more than one
/// hour between consecutive samples ends a run.
pub fn merge_events_timed(hours: &[i64], flags: &[bool]) -> Vec<EventInterval> {
    assert_eq!(hours.len(), flags.len());
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for i in 0..flags.len() {
        if let Some(s) = open {
            if !flags[i] || hours[i] - hours[i - 1] != SECONDS_PER_HOUR {
                out.push(EventInterval { start: s, end: i - 1 });
                open = None;
            }
        }
        if flags[i] && open.is_none() {
            open = Some(i);
        }
    }
    if let Some(s) = open {
        out.push(EventInterval {
            start: s,
            end: flags.len() - 1,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventConfusion {
    /// Predicted events overlapping at least one truth event.
    pub tp: u64,
    /// Predicted events overlapping none.
    pub fp: u64,
    /// Truth events overlapped by no predicted event.
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Truth events overlapped by at least one predicted event.
    pub truth_hit: u64,
}

impl EventConfusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fscore(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn n_truth(&self) -> u64 {
        self.truth_hit + self.fn_
    }

    pub fn n_predicted(&self) -> u64 {
        self.tp + self.fp
    }
}

impl std::ops::AddAssign for EventConfusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.truth_hit += o.truth_hit;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipOrder {
    /// Merge runs over the whole series, then keep each event's in-window hours.
    MergeThenClip,
    /// Blank out-of-window hours first, then merge.
    ClipThenMerge,
}

/// Daytime windows in local hours, each `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaytimePolicy {
    pub truth_hours: (u8, u8),
    pub issue_hours: (u8, u8),
    pub order: ClipOrder,
}

impl Default for DaytimePolicy {
    fn default() -> Self {
        Self {
            truth_hours: (5, 19),
            issue_hours: (5, 12),
            order: ClipOrder::MergeThenClip,
        }
    }
}

impl DaytimePolicy {
    /// Score every hour of the day.
    pub fn all_day() -> Self {
        Self {
            truth_hours: (0, 24),
            issue_hours: (0, 24),
            order: ClipOrder::MergeThenClip,
        }
    }
}

fn in_window(h: u8, w: (u8, u8)) -> bool {
    h >= w.0 && h < w.1
}

/// Hour sets of the events after windowing, as sorted sample indices.
fn windowed_events(hours: &[i64], local: &[u8], flags: &[bool], window: (u8, u8), order: ClipOrder) -> Vec<Vec<usize>> {
    match order {
        ClipOrder::MergeThenClip => merge_events_timed(hours, flags)
            .into_iter()
            .map(|e| {
                (e.start..=e.end)
                    .filter(|&i| in_window(local[i], window))
                    .collect::<Vec<_>>()
            })
            .filter(|v| !v.is_empty())
            .collect(),
        ClipOrder::ClipThenMerge => {
            let masked: Vec<bool> = flags
                .iter()
                .zip(local)
                .map(|(&f, &h)| f && in_window(h, window))
                .collect();
            merge_events_timed(hours, &masked)
                .into_iter()
                .map(|e| (e.start..=e.end).collect())
                .collect()
        }
    }
}

/// Event confusion over timestamped samples. `local` is the local hour of
/// day of each sample; `hours` are hour starts in ascending order.
pub fn event_confusion_timed(
    hours: &[i64],
    local: &[u8],
    truth: &[bool],
    predicted: &[bool],
    policy: &DaytimePolicy,
) -> EventConfusion {
    assert!(hours.len() == local.len() && hours.len() == truth.len() && hours.len() == predicted.len());
    let t = windowed_events(hours, local, truth, policy.truth_hours, policy.order);
    let p = windowed_events(hours, local, predicted, policy.issue_hours, policy.order);
    // Membership of each sample in a truth event.
    let mut owner = vec![usize::MAX; hours.len()];
    for (k, ev) in t.iter().enumerate() {
        for &i in ev {
            owner[i] = k;
        }
    }
    let mut hit = vec![false; t.len()];
    let mut c = EventConfusion::default();
    for ev in &p {
        let mut any = false;
        for &i in ev {
            if owner[i] != usize::MAX {
                hit[owner[i]] = true;
                any = true;
            }
        }
        if any {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    c.truth_hit = hit.iter().filter(|&&h| h).count() as u64;
    c.fn_ = t.len() as u64 - c.truth_hit;
    c
}

/// Event confusion for two series on consecutive hours; `local[i]` is the
/// local hour of day of sample `i`.
pub fn event_confusion(truth: &[bool], predicted: &[bool], local: &[u8], policy: &DaytimePolicy) -> EventConfusion {
    let hours: Vec<i64> = (0..truth.len() as i64).map(|i| i * SECONDS_PER_HOUR).collect();
    event_confusion_timed(&hours, local, truth, predicted, policy)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset spans {folds} weekly folds; need at least {needed}")]
    InsufficientSpan { folds: usize, needed: usize },
    #[error(transparent)]
    Model(#[from] EnsembleError),
    #[error("{0}")]
    Learner(String),
}

/// Anything that can be fitted on one fold and predict event classes.
pub trait Learner: Sync {
    fn name(&self) -> String;
    fn fit_predict(
        &self,
        x_train: &Matrix,
        y_train: &[EventLabel],
        x_test: &Matrix,
        seed: u64,
    ) -> Result<FoldPrediction, EvalError>;
}

pub struct FoldPrediction {
    pub test: Vec<bool>,
    pub train: Option<Vec<bool>>,
}

/// A forest learner. Regression forests train on confidence scores and
/// threshold their output.
#[derive(Debug, Clone)]
pub struct ForestLearner {
    pub params: ForestParams,
    pub score_train: bool,
}

impl ForestLearner {
    pub fn new(params: ForestParams) -> Self {
        Self {
            params,
            score_train: false,
        }
    }

    pub fn fit(&self, x: &Matrix, y: &[EventLabel], seed: u64, hash: &str) -> Result<ForestModel, EnsembleError> {
        let mut p = self.params.clone();
        p.seed = seed;
        match p.task {
            Task::Classification => {
                let c: Vec<u32> = y.iter().map(|l| l.positive as u32).collect();
                fit_forest(x, Target::Classes(&c), &p, hash)
            }
            Task::Regression => {
                let v: Vec<f64> = y.iter().map(|l| l.score as f64).collect();
                fit_forest(x, Target::Values(&v), &p, hash)
            }
        }
    }
}

impl Learner for ForestLearner {
    fn name(&self) -> String {
        variant_name(&self.params)
    }

    fn fit_predict(
        &self,
        x_train: &Matrix,
        y_train: &[EventLabel],
        x_test: &Matrix,
        seed: u64,
    ) -> Result<FoldPrediction, EvalError> {
        let m = self.fit(x_train, y_train, seed, "")?;
        let to_bool = |v: Vec<u32>| v.into_iter().map(|c| c == 1).collect::<Vec<_>>();
        Ok(FoldPrediction {
            test: to_bool(m.predict(x_test)?),
            train: if self.score_train {
                Some(to_bool(m.predict(x_train)?))
            } else {
                None
            },
        })
    }
}

/// `cls-et`, `reg-rf` and so on.
pub fn variant_name(p: &ForestParams) -> String {
    let task = match p.task {
        Task::Classification => "cls",
        Task::Regression => "reg",
    };
    let v = match p.variant {
        crate::ensemble::Variant::RandomForest => "rf",
        crate::ensemble::Variant::ExtraTrees => "et",
    };
    format!("{task}-{v}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvParams {
    pub fold_hours: i64,
    pub train_folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub daytime: DaytimePolicy,
    /// Also score predictions on the training rows.
    pub train_metrics: bool,
    /// Evaluate only the first this-many test folds.
    pub max_test_folds: Option<usize>,
}

impl Default for CvParams {
    fn default() -> Self {
        Self {
            fold_hours: 168,
            train_folds: 48,
            repeats: 1,
            seed: 0,
            daytime: DaytimePolicy::default(),
            train_metrics: false,
            max_test_folds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub fscore: MeanStd,
}

impl MetricSummary {
    pub fn of(runs: &[EventConfusion]) -> Self {
        let p: Vec<f64> = runs.iter().map(|c| c.precision()).collect();
        let r: Vec<f64> = runs.iter().map(|c| c.recall()).collect();
        let f: Vec<f64> = runs.iter().map(|c| c.fscore()).collect();
        Self {
            precision: MeanStd::of(&p),
            recall: MeanStd::of(&r),
            fscore: MeanStd::of(&f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub variant: String,
    pub n_test_folds: usize,
    /// Summed confusion per repeat.
    pub test_runs: Vec<EventConfusion>,
    pub test: MetricSummary,
    pub train_runs: Vec<EventConfusion>,
    pub train: Option<MetricSummary>,
}

pub const CV_CSV_HEADER: &str = "variant,precision_mean,precision_std,recall_mean,recall_std,f_mean,f_std";

impl CvReport {
    pub fn csv_row(&self) -> String {
        let m = &self.test;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.variant, m.precision.mean, m.precision.std, m.recall.mean, m.recall.std, m.fscore.mean, m.fscore.std
        )
    }
}

pub fn cv_csv(reports: &[CvReport]) -> String {
    let mut s = String::from(CV_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Plain-text table with one row per variant, as `mean±std` cells.
pub fn cv_table(reports: &[CvReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>11} {:>11} {:>11}",
        "model", "precision", "recall", "f-score"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<8} {:>11} {:>11} {:>11}",
            r.variant,
            r.test.precision.to_string(),
            r.test.recall.to_string(),
            r.test.fscore.to_string()
        );
        if let Some(t) = &r.train {
            let _ = writeln!(
                s,
                "{:<8} {:>11} {:>11} {:>11}",
                "  train",
                t.precision.to_string(),
                t.recall.to_string(),
                t.fscore.to_string()
            );
        }
    }
    s
}

/// Row indices per weekly fold, anchored at the first local Monday 00:00 at
/// or after the first sample. Earlier samples belong to no fold.
pub fn weekly_folds(dataset: &Dataset, calendar: &LocalCalendar, fold_hours: i64) -> Vec<Vec<usize>> {
    let Some(first) = dataset.x.hours.first() else {
        return Vec::new();
    };
    let anchor = calendar.first_monday_at_or_after(first.hour_start);
    let width = fold_hours * SECONDS_PER_HOUR;
    let mut folds: Vec<Vec<usize>> = Vec::new();
    for (i, h) in dataset.x.hours.iter().enumerate() {
        if h.hour_start < anchor {
            continue;
        }
        let k = ((h.hour_start - anchor) / width) as usize;
        if folds.len() <= k {
            folds.resize(k + 1, Vec::new());
        }
        folds[k].push(i);
    }
    folds
}

struct FoldResult {
    test: EventConfusion,
    train: Option<EventConfusion>,
}

fn score_rows(dataset: &Dataset, rows: &[usize], predicted: &[bool], policy: &DaytimePolicy) -> EventConfusion {
    let hours: Vec<i64> = rows.iter().map(|&r| dataset.x.hours[r].hour_start).collect();
    let local: Vec<u8> = rows.iter().map(|&r| dataset.x.hours[r].local_hour_of_day).collect();
    let truth: Vec<bool> = rows.iter().map(|&r| dataset.labels[r].positive).collect();
    event_confusion_timed(&hours, &local, &truth, predicted, policy)
}

fn run_fold(
    dataset: &Dataset,
    folds: &[Vec<usize>],
    k: usize,
    cv: &CvParams,
    learner: &dyn Learner,
    seed: u64,
) -> Result<FoldResult, EvalError> {
    let train: Vec<usize> = folds[k - cv.train_folds..k].iter().flatten().copied().collect();
    let test = &folds[k];
    let std = Standardizer::fit(&dataset.x, &train);
    let xtr = std.transform(&dataset.x.select_rows(&train));
    let xte = std.transform(&dataset.x.select_rows(test));
    let ytr: Vec<EventLabel> = train.iter().map(|&r| dataset.labels[r]).collect();
    let pred = learner.fit_predict(&xtr, &ytr, &xte, seed)?;
    Ok(FoldResult {
        test: score_rows(dataset, test, &pred.test, &cv.daytime),
        train: pred.train.map(|p| score_rows(dataset, &train, &p, &cv.daytime)),
    })
}

/// Rolling-origin evaluation: each test fold is scored by a model trained
/// on the `train_folds` folds before it. Confusions are summed over folds
/// before computing metrics, once per repeat with seed `seed + repeat`.
pub fn rolling_cv(
    dataset: &Dataset,
    calendar: &LocalCalendar,
    cv: &CvParams,
    learner: &dyn Learner,
) -> Result<CvReport, EvalError> {
    let folds = weekly_folds(dataset, calendar, cv.fold_hours);
    if folds.len() < cv.train_folds + 1 {
        return Err(EvalError::InsufficientSpan {
            folds: folds.len(),
            needed: cv.train_folds + 1,
        });
    }
    let mut test_folds: Vec<usize> = (cv.train_folds..folds.len())
        .filter(|&k| !folds[k].is_empty())
        .collect();
    if let Some(m) = cv.max_test_folds {
        test_folds.truncate(m);
    }
    let mut test_runs = Vec::new();
    let mut train_runs = Vec::new();
    for r in 0..cv.repeats.max(1) {
        let seed = cv.seed.wrapping_add(r as u64);
        let results: Vec<FoldResult> = test_folds
            .par_iter()
            .map(|&k| run_fold(dataset, &folds, k, cv, learner, seed))
            .collect::<Result<_, _>>()?;
        let mut t = EventConfusion::default();
        let mut tr = EventConfusion::default();
        for res in results {
            t += res.test;
            if let Some(c) = res.train {
                tr += c;
            }
        }
        test_runs.push(t);
        if cv.train_metrics {
            train_runs.push(tr);
        }
    }
    Ok(CvReport {
        variant: learner.name(),
        n_test_folds: test_folds.len(),
        test: MetricSummary::of(&test_runs),
        train: cv.train_metrics.then(|| MetricSummary::of(&train_runs)),
        test_runs,
        train_runs,
    })
}

/// Candidate values for the hyperparameters left to model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelGrid {
    pub max_features: Vec<MaxFeatures>,
    pub min_samples_split: Vec<usize>,
}

impl Default for ModelGrid {
    fn default() -> Self {
        Self {
            max_features: vec![MaxFeatures::Sqrt, MaxFeatures::Fraction(0.33)],
            min_samples_split: vec![2, 8, 32],
        }
    }
}

impl ModelGrid {
    pub fn candidates(&self, base: &ForestParams) -> Vec<ForestParams> {
        let mut out = Vec::new();
        for &mf in &self.max_features {
            for &mss in &self.min_samples_split {
                let mut p = base.clone();
                p.max_features = mf;
                p.min_samples_split = mss;
                out.push(p);
            }
        }
        out
    }
}

/// Pick the grid point with the best test F over the first
/// `selection_folds` test folds. Ties keep the earlier candidate.
pub fn select_params(
    dataset: &Dataset,
    calendar: &LocalCalendar,
    cv: &CvParams,
    base: &ForestParams,
    grid: &ModelGrid,
    selection_folds: usize,
) -> Result<(ForestParams, Vec<(ForestParams, f64)>), EvalError> {
    let mut sel = *cv;
    sel.repeats = 1;
    sel.train_metrics = false;
    sel.max_test_folds = Some(selection_folds);
    let mut scored = Vec::new();
    for p in grid.candidates(base) {
        let r = rolling_cv(dataset, calendar, &sel, &ForestLearner::new(p.clone()))?;
        scored.push((p, r.test.fscore.mean));
    }
    let best = scored
        .iter()
        .fold(None::<&(ForestParams, f64)>, |b, c| match b {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
        .map(|b| b.0.clone())
        .unwrap_or_else(|| base.clone());
    Ok((best, scored))
}

/// Column hash for a dataset's predictors.
pub fn dataset_hash(d: &Dataset) -> String {
    descriptor_hash(&d.x.columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(s: &str) -> Vec<bool> {
        s.bytes().map(|c| c == b'1').collect()
    }

    #[test]
    fn merge_examples() {
        assert!(merge_events(&b("000")).is_empty());
        assert_eq!(
            merge_events(&b("01101")),
            vec![EventInterval { start: 1, end: 2 }, EventInterval { start: 4, end: 4 }]
        );
        assert_eq!(merge_events(&b("1111")), vec![EventInterval { start: 0, end: 3 }]);
    }

    #[test]
    fn timed_merge_breaks_on_gaps() {
        let hours = [0, 3600, 7200 * 2, 7200 * 2 + 3600];
        let ev = merge_events_timed(&hours, &[true; 4]);
        assert_eq!(ev.len(), 2);
    }

    #[test]
    fn overlap_examples() {
        let all = DaytimePolicy::all_day();
        let local = vec![10u8; 10];
        let truth = b("0011110000");
        let c = event_confusion(&truth, &b("0000111110"), &local, &all);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
        let c = event_confusion(&truth, &b("0000000110"), &local, &all);
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
        let c = event_confusion(&truth, &truth, &local, &all);
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
    }

    #[test]
    fn daytime_clipping() {
        let p = DaytimePolicy::default();
        let local: Vec<u8> = (0..24).collect();
        // Truth 3..=6 straddles 5 am: clipped to 5..=6, kept.
        let mut truth = vec![false; 24];
        (3..=6).for_each(|h| truth[h] = true);
        // Prediction issued at 13:00 is outside the issue window and ignored.
        let mut pred = vec![false; 24];
        pred[13] = true;
        let c = event_confusion(&truth, &pred, &local, &p);
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 1));
        // A prediction run from 2 am to 5 am keeps its 5 am hour and hits.
        let mut pred = vec![false; 24];
        (2..=5).for_each(|h| pred[h] = true);
        let c = event_confusion(&truth, &pred, &local, &p);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
    }

    #[test]
    fn metric_zero_conventions() {
        let c = EventConfusion::default();
        assert_eq!((c.precision(), c.recall(), c.fscore()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mean_std_population() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
