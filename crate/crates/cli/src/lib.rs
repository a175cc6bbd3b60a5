//! The `odorwatch` operator commands. Every command returns a JSON summary;
//! failures become a `{kind, error}` object and a nonzero exit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use odorwatch_core::analytics::{
    activity_from_log, default_stopwords, heatmap_csv, ngram_csv, ngram_frequency, report_texts, segment_users,
    shares_csv, stats_csv, temporal_heatmap, AnalyticsError,
};
use odorwatch_core::config::{Provenance, RunConfig};
use odorwatch_core::dataset::{Dataset, FeatureMatrix, FeatureParams};
use odorwatch_core::ensemble::{ForestParams, Task, Variant};
use odorwatch_core::evaluation::{
    cv_csv, cv_table, dataset_hash, rolling_cv, select_params, variant_name, ForestLearner,
};
use odorwatch_core::formats;
use odorwatch_core::ingest::{new_readings, pull_with_retry, Backoff};
use odorwatch_core::interpret::{interpret, interpretation_design, select_cluster_params, InterpretParams, MAX_LAG};
use odorwatch_core::store::{Store, StoreError};
use odorwatch_core::synthetic::{generate, SyntheticConfig};

#[derive(Debug, Parser)]
#[command(
    name = "odorwatch",
    version,
    about = "Smell reports, sensor data and smell-event prediction"
)]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub timezone: Option<String>,
    /// Seeds every RNG stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    #[arg(long, global = true)]
    pub sensor_source: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration.
    Config,
    /// Load CSV files, or one hour from the sensor feed, into the store.
    Ingest(IngestArgs),
    /// Fill an empty store with the synthetic benchmark.
    Synth(SynthArgs),
    /// Write the predictor matrix and labels.
    Build(OutArgs),
    /// Fit one forest on every stored sample and save it.
    Train(TrainArgs),
    /// Rolling-origin cross-validation.
    Eval(EvalArgs),
    /// Cluster, eliminate and explain the smell-event samples.
    Interpret(InterpretArgs),
    /// User segments, frequent phrases and the day/hour heatmap.
    Analytics(OutArgs),
    /// Run the API, the sensor scheduler and the notifier.
    Serve,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long)]
    pub sensors: Option<PathBuf>,
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    /// Skip malformed report rows instead of failing.
    #[arg(long)]
    pub lenient: bool,
    /// Pull the hour starting at this epoch second from the sensor source.
    #[arg(long)]
    pub pull_hour: Option<i64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2 * 365 * 24)]
    pub hours: usize,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "cls-et")]
    pub variant: String,
    /// Overrides the configured forest size.
    #[arg(long)]
    pub trees: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Repeatable; defaults to cls-et and cls-rf.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Score only the first N test folds.
    #[arg(long)]
    pub max_test_folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seeded runs after the one DBSCAN parameter search.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[arg(long)]
    pub proximity_trees: Option<usize>,
    #[arg(long)]
    pub rfe_trees: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub error: String,
}

impl CliError {
    pub fn new(kind: &'static str, e: impl ToString) -> Self {
        Self {
            kind,
            error: e.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

fn err<E: ToString>(kind: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::new(kind, e)
}

/// File, then `ODORWATCH_*` variables, then flags.
pub fn resolve_config<I, K, V>(cli: &Cli, env: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(err("config"))?,
        None => RunConfig::default(),
    };
    cfg.apply_env(env).map_err(err("config"))?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(t) = &cli.timezone {
        cfg.timezone = t.clone();
    }
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(l) = &cli.listen {
        cfg.server.listen = l.clone();
    }
    if let Some(s) = &cli.sensor_source {
        cfg.server.sensor_source = s.clone();
    }
    cfg.validate().map_err(err("config"))?;
    Ok(cfg)
}

pub fn run(cli: &Cli, cfg: &RunConfig) -> Result<Value, CliError> {
    match &cli.command {
        Command::Config => Ok(json!({ "config": cfg.to_toml(), "provenance": Provenance::of(cfg) })),
        Command::Ingest(a) => ingest(cfg, a),
        Command::Synth(a) => synth(cfg, a),
        Command::Build(a) => build(cfg, &a.out),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Interpret(a) => interpret_cmd(cfg, a),
        Command::Analytics(a) => analytics(cfg, &a.out),
        Command::Serve => {
            let rt = tokio::runtime::Runtime::new().map_err(err("runtime"))?;
            rt.block_on(odorwatch_server::serve(cfg.clone()))
                .map_err(err("serve"))?;
            Ok(json!({ "stopped": true }))
        }
    }
}

fn open_store(cfg: &RunConfig) -> Result<Store, CliError> {
    Store::open(&cfg.data_dir).map_err(err("store"))
}

fn open_file(p: &Path) -> Result<fs::File, CliError> {
    fs::File::open(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))
}

/// CSV artifacts open with one comment line carrying the provenance.
pub fn provenance_line(p: &Provenance) -> String {
    format!("# config_hash={} code_version={}\n", p.config_hash, p.code_version)
}

fn write_artifact(dir: &Path, name: &str, prov: &Provenance, body: &[u8]) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(err("io"))?;
    let path = dir.join(name);
    let mut bytes = provenance_line(prov).into_bytes();
    bytes.extend_from_slice(body);
    fs::write(&path, bytes).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(err("io"))?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(v).map_err(err("io"))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn ingest(cfg: &RunConfig, a: &IngestArgs) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let mut out = serde_json::Map::new();
    if let Some(p) = &a.reports {
        let (reports, skipped) = if a.lenient {
            formats::read_reports_lenient(open_file(p)?).map_err(err("format"))?
        } else {
            (formats::read_reports(open_file(p)?).map_err(err("format"))?, 0)
        };
        let (mut stored, mut rejected) = (0usize, 0usize);
        for r in reports {
            match store.append_report(r) {
                Ok(_) => stored += 1,
                Err(StoreError::Rejected(reason)) => {
                    log::warn!("report rejected: {reason}");
                    rejected += 1;
                }
                Err(e) => return Err(CliError::new("store", e)),
            }
        }
        out.insert(
            "reports".into(),
            json!({ "stored": stored, "rejected": rejected, "malformed": skipped }),
        );
    }
    if let Some(p) = &a.sensors {
        let batch = formats::read_sensors(open_file(p)?).map_err(err("format"))?;
        let stored = store_new_readings(&store, batch.readings)?;
        out.insert(
            "sensors".into(),
            json!({ "stored": stored, "malformed": batch.malformed, "unknown_channel": batch.unknown_channel }),
        );
    }
    if let Some(p) = &a.interactions {
        let events = formats::read_interactions(open_file(p)?).map_err(err("format"))?;
        let n = events.len();
        for e in events {
            store.append_interaction(e).map_err(err("store"))?;
        }
        out.insert("interactions".into(), json!({ "stored": n }));
    }
    if let Some(hour) = a.pull_hour {
        let feed = odorwatch_server::feed_for(&cfg.server.sensor_source)
            .ok_or_else(|| CliError::new("config", "no sensor source configured"))?;
        let batch =
            pull_with_retry(feed.as_ref(), hour, &Backoff::default(), std::thread::sleep).map_err(err("feed"))?;
        let stored = store_new_readings(&store, batch.readings)?;
        out.insert(
            "pulled".into(),
            json!({ "hour": hour, "stored": stored, "malformed": batch.malformed }),
        );
    }
    if out.is_empty() {
        return Err(CliError::new(
            "usage",
            "nothing to ingest: give --reports, --sensors, --interactions or --pull-hour",
        ));
    }
    Ok(Value::Object(out))
}

/// Appends readings not already stored; returns how many were new.
fn store_new_readings(store: &Store, readings: Vec<odorwatch_core::domain::SensorReading>) -> Result<usize, CliError> {
    let (Some(lo), Some(hi)) = (
        readings.iter().map(|r| r.observed_at).min(),
        readings.iter().map(|r| r.observed_at).max(),
    ) else {
        return Ok(0);
    };
    let fresh = new_readings(&store.readings_in(lo, hi + 1), readings);
    let n = fresh.len();
    store.append_readings(fresh).map_err(err("store"))?;
    Ok(n)
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let snap = store.snapshot();
    if !snap.readings.is_empty() || !snap.reports.is_empty() {
        return Err(CliError::new("store", "synth needs an empty store"));
    }
    let b = generate(&SyntheticConfig {
        seed: cfg.seed,
        hours: a.hours,
        ..SyntheticConfig::default()
    })
    .map_err(err("synthetic"))?;
    store.append_readings(b.readings.clone()).map_err(err("store"))?;
    for r in &b.reports {
        store.append_report(r.clone()).map_err(err("store"))?;
    }
    Ok(json!({
        "readings": b.readings.len(),
        "reports": b.reports.len(),
        "hours": b.planted.len(),
        "positive_rate": b.positive_rate(),
        "h2s_threshold": b.h2s_threshold,
        "disagreement": b.disagreement,
    }))
}

fn dataset(cfg: &RunConfig, store: &Store, features: FeatureParams) -> Result<Dataset, CliError> {
    let mut pipeline = cfg.pipeline().map_err(err("config"))?;
    pipeline.features = features;
    pipeline.full_dataset(store).map_err(err("dataset"))
}

pub fn x_csv(d: &Dataset) -> Vec<u8> {
    let mut s = String::from("hour_start");
    for c in &d.x.columns {
        s.push(',');
        s.push_str(&c.to_string());
    }
    s.push('\n');
    for r in 0..d.x.n_rows() {
        let _ = write!(s, "{}", d.x.hours[r].hour_start);
        for v in d.x.row(r) {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    s.into_bytes()
}

pub fn y_csv(d: &Dataset) -> Vec<u8> {
    let mut s = String::from("hour_start,score,positive\n");
    for l in &d.labels {
        let _ = writeln!(s, "{},{},{}", l.hour, l.score, u8::from(l.positive));
    }
    s.into_bytes()
}

fn build(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let d = dataset(cfg, &store, cfg.features)?;
    let prov = Provenance::of(cfg);
    write_artifact(out, "X.csv", &prov, &x_csv(&d))?;
    write_artifact(out, "y.csv", &prov, &y_csv(&d))?;
    let summary = json!({
        "provenance": prov,
        "rows": d.len(),
        "columns": d.x.n_cols(),
        "positive_rate": d.positive_rate(),
        "descriptor_hash": dataset_hash(&d),
        "first_hour": d.x.hours.first().map(|h| h.hour_start),
        "last_hour": d.x.hours.last().map(|h| h.hour_start),
    });
    write_json(out, "dataset.json", &summary)?;
    Ok(summary)
}

pub fn parse_variant(name: &str) -> Result<(Variant, Task), CliError> {
    Ok(match name {
        "cls-et" => (Variant::ExtraTrees, Task::Classification),
        "cls-rf" => (Variant::RandomForest, Task::Classification),
        "reg-et" => (Variant::ExtraTrees, Task::Regression),
        "reg-rf" => (Variant::RandomForest, Task::Regression),
        other => {
            return Err(CliError::new(
                "usage",
                format!("unknown variant {other:?}; expected cls-et, cls-rf, reg-et or reg-rf"),
            ))
        }
    })
}

fn forest_params(cfg: &RunConfig, name: &str, trees: Option<usize>) -> Result<ForestParams, CliError> {
    let (v, t) = parse_variant(name)?;
    let mut p = ForestParams::new(v, t);
    p.n_trees = trees.unwrap_or(match t {
        Task::Classification => cfg.model.classification_trees,
        Task::Regression => cfg.model.regression_trees,
    });
    p.score_threshold = cfg.labels.threshold as f64;
    p.seed = cfg.seed;
    Ok(p)
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let d = dataset(cfg, &store, cfg.features)?;
    let params = forest_params(cfg, &a.variant, a.trees)?;
    let standardizer = odorwatch_core::dataset::Standardizer::fit_all(&d.x);
    let x = standardizer.transform(&d.x);
    let model = ForestLearner::new(params)
        .fit(&x, &d.labels, cfg.seed, &dataset_hash(&d))
        .map_err(err("model"))?;
    let last = d.x.hours.last().map_or(0, |h| h.hour_start);
    let date = cfg.calendar().map_err(err("config"))?.local_date(last);
    let path = store
        .save_model(date, &a.variant, &model.to_bytes())
        .map_err(err("store"))?;
    Ok(json!({
        "provenance": Provenance::of(cfg),
        "variant": a.variant,
        "rows": d.len(),
        "model": path,
        "descriptor_hash": dataset_hash(&d),
    }))
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let d = dataset(cfg, &store, cfg.features)?;
    let calendar = cfg.calendar().map_err(err("config"))?;
    let mut cv = cfg.cv;
    if let Some(r) = a.repeats {
        cv.repeats = r;
    }
    if a.max_test_folds.is_some() {
        cv.max_test_folds = a.max_test_folds;
    }
    let names = if a.variants.is_empty() {
        vec!["cls-et".to_string(), "cls-rf".to_string()]
    } else {
        a.variants.clone()
    };
    let mut reports = Vec::new();
    let mut selected = Vec::new();
    for name in &names {
        let mut p = forest_params(cfg, name, a.trees)?;
        if let Some(grid) = &cfg.model.grid {
            let (best, scored) =
                select_params(&d, &calendar, &cv, &p, grid, cfg.model.selection_folds).map_err(err("evaluation"))?;
            selected.push(json!({
                "variant": variant_name(&best),
                "max_features": best.max_features,
                "min_samples_split": best.min_samples_split,
                "scores": scored.iter().map(|(p, f)| json!({
                    "max_features": p.max_features, "min_samples_split": p.min_samples_split, "f": f
                })).collect::<Vec<_>>(),
            }));
            p = best;
        }
        let learner = ForestLearner {
            params: p,
            score_train: cv.train_metrics,
        };
        reports.push(rolling_cv(&d, &calendar, &cv, &learner).map_err(err("evaluation"))?);
    }
    let prov = Provenance::of(cfg);
    write_artifact(&a.out, "cv.csv", &prov, cv_csv(&reports).as_bytes())?;
    let table = cv_table(&reports);
    let summary = json!({
        "provenance": prov,
        "rows": d.len(),
        "reports": reports,
        "selection": selected,
        "table": table,
    });
    write_json(&a.out, "cv.json", &summary)?;
    eprint!("{table}");
    Ok(summary)
}

/// Interpretation features over every stored hour, with the event labels.
pub fn interpretation_inputs(cfg: &RunConfig, store: &Store) -> Result<(FeatureMatrix, Vec<bool>), CliError> {
    let d = dataset(
        cfg,
        store,
        FeatureParams {
            lags: MAX_LAG as usize,
            calendar: false,
        },
    )?;
    let f = FeatureMatrix::from_raw(&interpretation_design(&d.x).map_err(err("interpret"))?);
    Ok((f, d.labels.iter().map(|l| l.positive).collect()))
}

fn interpret_cmd(cfg: &RunConfig, a: &InterpretArgs) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let (features, positive) = interpretation_inputs(cfg, &store)?;
    let mut params: InterpretParams = cfg.interpret.clone();
    if let Some(t) = a.proximity_trees {
        params.proximity_trees = t;
    }
    if let Some(t) = a.rfe_trees {
        params.rfe_trees = t;
    }
    let selection = match params.cluster {
        Some(_) => None,
        None => {
            let s = select_cluster_params(&features, &positive, &params).map_err(err("interpret"))?;
            params.cluster = Some((s.eps, s.min_pts));
            Some(s)
        }
    };
    let mut runs = Vec::new();
    let mut counts: std::collections::BTreeMap<String, u64> = Default::default();
    let mut first = None;
    for i in 0..a.runs.max(1) {
        let p = InterpretParams {
            seed: params.seed.wrapping_add(i),
            ..params.clone()
        };
        let r = interpret(&features, &positive, &p).map_err(err("interpret"))?;
        let top = r.top_feature().unwrap_or("").to_string();
        *counts.entry(top.clone()).or_default() += 1;
        runs.push(json!({
            "seed": p.seed,
            "top_feature": top,
            "importance": r.importance.first().map(|w| w.importance),
            "cluster_size": r.cluster_hours.len(),
            "cv_test_f": r.cv_test.fscore,
        }));
        if first.is_none() {
            first = Some(r);
        }
    }
    let report = first.expect("at least one run");
    fs::create_dir_all(&a.out).map_err(err("io"))?;
    fs::write(a.out.join("tree.txt"), &report.tree_text).map_err(err("io"))?;
    let summary = json!({
        "provenance": Provenance::of(cfg),
        "features": features.n_cols(),
        "samples": features.n_rows(),
        "selection": selection,
        "top_feature_counts": counts,
        "runs": runs,
        "report": report,
    });
    write_json(&a.out, "interpretation.json", &summary)?;
    Ok(json!({
        "provenance": summary["provenance"],
        "top_feature_counts": summary["top_feature_counts"],
        "eps": report.eps,
        "min_pts": report.min_pts,
        "cv_test_f": report.cv_test.fscore,
    }))
}

fn analytics(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let snap = store.snapshot();
    let prov = Provenance::of(cfg);
    let users = activity_from_log(&snap.interactions, &snap.reports);
    // Without an interaction log there is nobody to segment; the text and
    // time outputs still stand.
    let seg = match segment_users(&users) {
        Ok(seg) => {
            write_artifact(out, "user_groups.csv", &prov, &shares_csv(&seg))?;
            write_artifact(out, "user_group_stats.csv", &prov, &stats_csv(&seg))?;
            Some(seg)
        }
        Err(AnalyticsError::EmptyPopulation) => {
            log::warn!("no active users; skipping segmentation");
            None
        }
        Err(e) => return Err(CliError::new("analytics", e)),
    };
    let texts = report_texts(&snap.reports);
    let stop = default_stopwords();
    for (n, name) in [(1, "unigrams.csv"), (2, "bigrams.csv")] {
        let grams = ngram_frequency(&texts, n, stop).map_err(err("analytics"))?;
        write_artifact(out, name, &prov, &ngram_csv(&grams))?;
    }
    let heat = temporal_heatmap(&snap.reports, &cfg.calendar().map_err(err("config"))?);
    write_artifact(out, "heatmap.csv", &prov, &heatmap_csv(&heat))?;
    let summary = json!({
        "provenance": prov,
        "users": users.len(),
        "reports": snap.reports.len(),
        "cuts": seg.as_ref().map(|s| s.cuts),
        "totals": seg.as_ref().map(|s| s.totals.clone()),
        "enthusiast_correlation": seg.as_ref().map(|s| s.enthusiast_correlation.clone()),
    });
    write_json(out, "analytics.json", &summary)?;
    Ok(summary)
}

/// Shared by the binary: parse, resolve, run, print.
pub fn main_with<I, K, V>(cli: Cli, env: I) -> i32
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let result = resolve_config(&cli, env).and_then(|cfg| run(&cli, &cfg));
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string(&v).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}
