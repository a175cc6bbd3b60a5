//! HTTP ingest API over the store, outbound HTTP sinks and the scheduler
//! task that drives the notifier.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use odorwatch_core::config::RunConfig;
use odorwatch_core::domain::{InteractionEvent, SmellReport, ZipCode};
use odorwatch_core::formats;
use odorwatch_core::ingest::{
    build_report, new_readings, new_report_id, pull_with_retry, AgencySink, Backoff, CsvFileFeed, FileSpool,
    ForwardQueue, IngestError, SensorFeed, SubmitPayload,
};
use odorwatch_core::notifier::{JsonLinesSink, Notification, NotificationSink, Service};
use odorwatch_core::store::{Store, StoreError};

pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    })
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub cfg: Arc<RunConfig>,
    pub agency: Option<Arc<dyn AgencySink>>,
    pub queue: Arc<ForwardQueue>,
    pub clock: Clock,
}

impl AppState {
    pub fn new(store: Arc<Store>, cfg: RunConfig) -> Self {
        let agency: Option<Arc<dyn AgencySink>> = match (&cfg.server.agency_url, &cfg.server.agency_spool) {
            (Some(url), _) => Some(Arc::new(HttpAgencySink::new(url.clone()))),
            (None, Some(path)) => Some(Arc::new(FileSpool::new(path.clone()))),
            (None, None) => None,
        };
        Self {
            store,
            cfg: Arc::new(cfg),
            agency,
            queue: Arc::new(ForwardQueue::default()),
            clock: system_clock(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: String,
}

fn err(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ApiError { error: msg.into() })).into_response()
}

fn store_err(e: StoreError) -> Response {
    match e {
        StoreError::Rejected(m) => err(StatusCode::BAD_REQUEST, m),
        other => err(StatusCode::SERVICE_UNAVAILABLE, other.to_string()),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/reports", post(submit_report).get(list_reports))
        .route("/export.csv", get(export_csv))
        .route("/interactions", post(post_interactions))
        .route("/sensors", get(list_sensors))
        .route("/notifications", get(list_notifications))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

#[derive(Serialize)]
struct Submitted {
    report_id: String,
}

async fn submit_report(State(st): State<AppState>, body: Bytes) -> Response {
    let payload: SubmitPayload = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return err(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let id = new_report_id(&mut rand::rng());
    let now = (st.clock)();
    let report = match build_report(
        &payload,
        now,
        id,
        &st.cfg.privacy,
        &st.cfg.regions,
        st.cfg.server.max_text_chars,
    ) {
        Ok(r) => r,
        Err(e) => return err(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let store = st.store.clone();
    let stored = report.clone();
    let id = match tokio::task::spawn_blocking(move || store.append_report(stored)).await {
        Ok(Ok(id)) => id,
        Ok(Err(e)) => return store_err(e),
        Err(e) => return err(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };
    // Every report goes to the agency regardless of rating; a failing sink
    // leaves it queued and does not fail the submission.
    if let Some(sink) = st.agency.clone() {
        let queue = st.queue.clone();
        tokio::task::spawn_blocking(move || queue.submit(sink.as_ref(), report));
    }
    Json(Submitted { report_id: id.0 }).into_response()
}

/// `[from, to)` in epoch seconds; both optional.
fn parse_range(q: &HashMap<String, String>) -> Result<(i64, i64), Response> {
    let get = |k: &str, default: i64| -> Result<i64, Response> {
        match q.get(k) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| err(StatusCode::BAD_REQUEST, format!("{k} must be epoch seconds"))),
        }
    };
    let (from, to) = (get("from", i64::MIN)?, get("to", i64::MAX)?);
    if from > to {
        return Err(err(StatusCode::BAD_REQUEST, "from is after to"));
    }
    Ok((from, to))
}

async fn list_reports(State(st): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let (from, to) = match parse_range(&q) {
        Ok(r) => r,
        Err(e) => return e,
    };
    let zip = match q.get("zip").map(|z| ZipCode::new(z.as_str())) {
        None => None,
        Some(Ok(z)) => Some(z),
        Some(Err(e)) => return err(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let reports: Vec<SmellReport> = st
        .store
        .reports_in(from, to)
        .into_iter()
        .filter(|r| zip.as_ref().is_none_or(|z| &r.zip_code == z))
        .collect();
    Json(reports).into_response()
}

async fn export_csv(State(st): State<AppState>) -> Response {
    match st.store.export_reports_csv() {
        Ok(b) => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], b).into_response(),
        Err(e) => store_err(e),
    }
}

/// Accepts one event or a list of events.
async fn post_interactions(State(st): State<AppState>, body: Bytes) -> Response {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(InteractionEvent),
        Many(Vec<InteractionEvent>),
    }
    let events = match serde_json::from_slice::<OneOrMany>(&body) {
        Ok(OneOrMany::One(e)) => vec![e],
        Ok(OneOrMany::Many(v)) => v,
        Err(e) => return err(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let n = events.len();
    for e in events {
        if let Err(e) = st.store.append_interaction(e) {
            return store_err(e);
        }
    }
    Json(serde_json::json!({ "accepted": n })).into_response()
}

async fn list_sensors(State(st): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    match parse_range(&q) {
        Ok((from, to)) => Json(st.store.readings_in(from, to)).into_response(),
        Err(e) => e,
    }
}

async fn list_notifications(State(st): State<AppState>) -> Response {
    Json(st.store.dispatched()).into_response()
}

// ---------------------------------------------------------------- HTTP sinks

fn blocking_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .expect("http client")
}

/// POSTs each report as canonical CSV (header plus one row).
pub struct HttpAgencySink {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpAgencySink {
    pub fn new(url: String) -> Self {
        Self {
            url,
            client: blocking_client(),
        }
    }
}

impl AgencySink for HttpAgencySink {
    fn forward(&self, report: &SmellReport) -> Result<(), String> {
        let mut body = Vec::new();
        formats::write_reports(&mut body, std::slice::from_ref(report)).map_err(|e| e.to_string())?;
        let resp = self
            .client
            .post(&self.url)
            .header("content-type", "text/csv")
            .body(body)
            .send()
            .map_err(|e| e.to_string())?;
        resp.error_for_status().map(|_| ()).map_err(|e| e.to_string())
    }
}

/// POSTs each notification as JSON.
pub struct WebhookSink {
    url: String,
    client: reqwest::blocking::Client,
}

impl WebhookSink {
    pub fn new(url: String) -> Self {
        Self {
            url,
            client: blocking_client(),
        }
    }
}

impl NotificationSink for WebhookSink {
    fn name(&self) -> &str {
        "webhook"
    }
    fn deliver(&self, n: &Notification) -> Result<(), String> {
        let body = serde_json::to_vec(n).map_err(|e| e.to_string())?;
        let resp = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| e.to_string())?;
        resp.error_for_status().map(|_| ()).map_err(|e| e.to_string())
    }
}

/// Sensor feed over HTTP: `GET <url>?hour=<epoch>` returning sensor CSV.
pub struct HttpCsvFeed {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpCsvFeed {
    pub fn new(url: String) -> Self {
        Self {
            url,
            client: blocking_client(),
        }
    }
}

impl SensorFeed for HttpCsvFeed {
    fn pull(&self, hour: i64) -> Result<formats::SensorBatch, IngestError> {
        let resp = self
            .client
            .get(&self.url)
            .query(&[("hour", hour)])
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| IngestError::Unavailable(e.to_string()))?;
        let text = resp.bytes().map_err(|e| IngestError::Unavailable(e.to_string()))?;
        let batch = formats::read_sensors(&text[..]).map_err(|e| IngestError::Invalid(e.to_string()))?;
        Ok(odorwatch_core::ingest::batch_for_hour(batch, hour))
    }
}

/// Feed for a configured source: http(s) URLs and file paths.
pub fn feed_for(source: &str) -> Option<Box<dyn SensorFeed>> {
    if source.is_empty() {
        None
    } else if source.starts_with("http://") || source.starts_with("https://") {
        Some(Box::new(HttpCsvFeed::new(source.to_string())))
    } else {
        Some(Box::new(CsvFileFeed { path: source.into() }))
    }
}

// ---------------------------------------------------------------- scheduler

/// One scheduler step: pull the hour that just ended, flush queued agency
/// copies, then tick the notifier.
pub fn scheduler_step(
    service: &Service,
    feed: Option<&dyn SensorFeed>,
    agency: Option<(&ForwardQueue, &dyn AgencySink)>,
    now: i64,
) -> odorwatch_core::notifier::TickOutcome {
    if let Some(feed) = feed {
        let hour = now - now.rem_euclid(3600) - 3600;
        match pull_with_retry(feed, hour, &Backoff::default(), std::thread::sleep) {
            Ok(batch) => {
                let existing = service.store.readings_in(hour, hour + 3600);
                let fresh = new_readings(&existing, batch.readings);
                if let Err(e) = service.store.append_readings(fresh) {
                    log::warn!("storing pulled readings failed: {e}");
                }
                if batch.malformed > 0 {
                    log::warn!("sensor feed: skipped {} malformed rows", batch.malformed);
                }
            }
            Err(e) => log::warn!("sensor pull for hour {hour} failed: {e}"),
        }
    }
    if let Some((q, sink)) = agency {
        q.flush(sink);
    }
    service.tick(now)
}

/// Builds the notifier service with the sinks named in the config.
pub fn build_service(store: Arc<Store>, cfg: &RunConfig) -> Result<Service, String> {
    let mut svc = Service::new(store, cfg.pipeline().map_err(|e| e.to_string())?, cfg.notifier.clone())
        .map_err(|e| e.to_string())?;
    svc.add_sink(Arc::new(JsonLinesSink::new(cfg.data_dir.join("notifications.jsonl"))));
    if let Some(url) = &cfg.server.webhook_url {
        svc.add_sink(Arc::new(WebhookSink::new(url.clone())));
    }
    Ok(svc)
}

/// Runs the API and the scheduler until ctrl-c.
pub async fn serve(cfg: RunConfig) -> Result<(), String> {
    let store = Arc::new(Store::open(&cfg.data_dir).map_err(|e| e.to_string())?);
    let state = AppState::new(store.clone(), cfg.clone());
    let service = Arc::new(build_service(store, &cfg)?);
    let feed: Option<Arc<dyn SensorFeed>> = feed_for(&cfg.server.sensor_source).map(Arc::from);
    let tick = Duration::from_secs(cfg.server.tick_seconds.max(1));
    {
        let (service, state) = (service.clone(), state.clone());
        tokio::spawn(async move {
            let mut every = tokio::time::interval(tick);
            loop {
                every.tick().await;
                let (service, state, feed) = (service.clone(), state.clone(), feed.clone());
                let now = (state.clock)();
                let out = tokio::task::spawn_blocking(move || {
                    let agency = state.agency.as_deref().map(|s| (state.queue.as_ref(), s));
                    scheduler_step(&service, feed.as_deref(), agency, now)
                })
                .await;
                if let Ok(out) = out {
                    for n in &out.dispatched {
                        log::info!("dispatched {}", n.dedupe_key);
                    }
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(&cfg.server.listen)
        .await
        .map_err(|e| format!("binding {}: {e}", cfg.server.listen))?;
    log::info!("listening on {}", cfg.server.listen);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}
