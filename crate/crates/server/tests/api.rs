use std::sync::{Arc, Mutex};

use axum::routing::post;
use axum::Router;
use odorwatch_core::config::RunConfig;
use odorwatch_core::domain::{SmellReport, ZipCode};
use odorwatch_core::formats::read_reports;
use odorwatch_core::ingest::{AgencySink, FileSpool};
use odorwatch_core::notifier::{
    MemorySink, Notification, NotificationKind, NotificationSink, Service, POSTHOC_MESSAGE,
};
use odorwatch_core::store::{BoundingBox, Region, RegionTable, Store};
use odorwatch_server::{router, scheduler_step, AppState, WebhookSink};
use serde_json::{json, Value};

// 2017-01-02 10:00 America/New_York
const NOW: i64 = 1_483_369_200;

fn config() -> RunConfig {
    RunConfig {
        regions: RegionTable(vec![
            Region {
                zip: ZipCode::new("15213").unwrap(),
                bbox: BoundingBox {
                    min_lat: 40.43,
                    min_lon: -79.97,
                    max_lat: 40.45,
                    max_lon: -79.94,
                },
            },
            Region {
                zip: ZipCode::new("15201").unwrap(),
                bbox: BoundingBox {
                    min_lat: 40.46,
                    min_lon: -79.97,
                    max_lat: 40.48,
                    max_lon: -79.94,
                },
            },
        ]),
        ..RunConfig::default()
    }
}

struct Harness {
    base: String,
    store: Arc<Store>,
    state: AppState,
    now: Arc<Mutex<i64>>,
    client: reqwest::Client,
}

async fn start(agency: Option<Arc<dyn AgencySink>>) -> Harness {
    let store = Arc::new(Store::in_memory());
    let mut state = AppState::new(store.clone(), config());
    state.agency = agency;
    let now = Arc::new(Mutex::new(NOW));
    let t = now.clone();
    state.clock = Arc::new(move || *t.lock().unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Harness {
        base,
        store,
        state,
        now,
        client: reqwest::Client::new(),
    }
}

impl Harness {
    async fn submit(&self, body: Value) -> (u16, Value) {
        let r = self
            .client
            .post(format!("{}/reports", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, String) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    fn set_now(&self, t: i64) {
        *self.now.lock().unwrap() = t;
    }
}

fn payload(rating: i64) -> Value {
    json!({ "rating": rating, "latitude": 40.4401, "longitude": -79.9502, "client_time": 5 })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn submit_validate_and_query() {
    let h = start(None).await;
    let (s, body) = h.submit(payload(3)).await;
    assert_eq!(s, 200);
    let id = body["report_id"].as_str().unwrap().to_string();
    let stored = h.store.reports_in(0, i64::MAX);
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].report_id.0, id);
    assert_eq!(stored[0].observed_at, NOW);
    assert_eq!(stored[0].client_time(), Some(5));
    assert_eq!(stored[0].zip_code.as_str(), "15213");

    assert_eq!(h.submit(payload(0)).await.0, 400);
    assert_eq!(h.submit(payload(6)).await.0, 400);
    assert_eq!(
        h.submit(json!({ "rating": 3, "latitude": 45.0, "longitude": -79.95 }))
            .await
            .0,
        400
    );
    assert_eq!(h.submit(json!({ "rating": 3 })).await.0, 400);
    assert_eq!(
        h.submit(json!({ "rating": 3, "latitude": 40.44, "longitude": -79.95, "email": "x" }))
            .await
            .0,
        400
    );

    let mut p = payload(5);
    p["smell_description"] = json!("industrial");
    p["symptoms"] = json!("headache");
    assert_eq!(h.submit(p).await.0, 200);
    let last = h.store.reports_in(0, i64::MAX).pop().unwrap();
    assert_eq!(last.smell_description.as_deref(), Some("industrial"));
    assert_eq!(last.symptoms.as_deref(), Some("headache"));

    // nothing in any response carries the raw coordinates
    let (_, listing) = h.get("/reports").await;
    assert!(!listing.contains("40.4401") && !listing.contains("-79.9502"));
    let (_, csv) = h.get("/export.csv").await;
    assert!(!csv.contains("40.44"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn range_queries_follow_the_store() {
    let h = start(None).await;
    for (i, t) in [NOW, NOW + 100, NOW + 200].into_iter().enumerate() {
        h.set_now(t);
        let mut p = payload(1 + i as i64);
        if i == 2 {
            p["latitude"] = json!(40.47);
        }
        assert_eq!(h.submit(p).await.0, 200);
    }
    let count = |s: &str| serde_json::from_str::<Vec<SmellReport>>(s).unwrap().len();
    let (_, all) = h.get("/reports").await;
    assert_eq!(count(&all), 3);
    let (_, mid) = h.get(&format!("/reports?from={}&to={}", NOW + 100, NOW + 200)).await;
    assert_eq!(count(&mid), 1);
    let (_, empty) = h.get(&format!("/reports?from={NOW}&to={NOW}")).await;
    assert_eq!(count(&empty), 0);
    let (_, zip) = h.get("/reports?zip=15201").await;
    assert_eq!(count(&zip), 1);
    assert_eq!(h.get("/reports?from=abc").await.0, 400);
    assert_eq!(h.get("/reports?from=10&to=5").await.0, 400);
    assert_eq!(h.get("/reports?zip=12").await.0, 400);
    assert_eq!(h.get("/sensors?from=x").await.0, 400);

    let (s, a) = h.get("/export.csv").await;
    assert_eq!(s, 200);
    let (_, b) = h.get("/export.csv").await;
    assert_eq!(a, b);
    let again = Store::in_memory();
    for r in read_reports(a.as_bytes()).unwrap() {
        again.append_report(r).unwrap();
    }
    assert_eq!(String::from_utf8(again.export_reports_csv().unwrap()).unwrap(), a);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn interactions_are_logged() {
    let h = start(None).await;
    let one = json!({ "anon_user_id": "u1", "hit_at": NOW, "data_at": NOW - 7200, "kind": "PLAYBACK" });
    let r = h
        .client
        .post(format!("{}/interactions", h.base))
        .json(&one)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let many = json!([one, { "anon_user_id": "u2", "hit_at": NOW, "data_at": null, "kind": "OTHER" }]);
    let r = h
        .client
        .post(format!("{}/interactions", h.base))
        .json(&many)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(h.store.interactions_in(0, i64::MAX).len(), 3);
    let undated = json!({ "anon_user_id": "u1", "hit_at": NOW, "data_at": null, "kind": "MAP_CLICK" });
    let r = h
        .client
        .post(format!("{}/interactions", h.base))
        .json(&undated)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let bad = json!({ "anon_user_id": "u1", "hit_at": NOW, "kind": "NOPE" });
    let r = h
        .client
        .post(format!("{}/interactions", h.base))
        .json(&bad)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
}

struct Down;
impl AgencySink for Down {
    fn forward(&self, _: &SmellReport) -> Result<(), String> {
        Err("agency offline".into())
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn agency_gets_every_report_and_outages_queue() {
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path().join("agency.csv");
    let h = start(Some(Arc::new(FileSpool::new(&spool)))).await;
    for r in [1, 5] {
        assert_eq!(h.submit(payload(r)).await.0, 200);
    }
    for _ in 0..50 {
        if spool.exists()
            && read_reports(std::fs::File::open(&spool).unwrap())
                .map(|v| v.len())
                .unwrap_or(0)
                == 2
        {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    let copies = read_reports(std::fs::File::open(&spool).unwrap()).unwrap();
    assert_eq!(copies.iter().map(|r| r.rating.get()).collect::<Vec<_>>(), vec![1, 5]);

    let h = start(Some(Arc::new(Down))).await;
    assert_eq!(h.submit(payload(4)).await.0, 200);
    for _ in 0..50 {
        if h.state.queue.len() == 1 {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    assert_eq!(h.state.queue.len(), 1);
    assert_eq!(h.store.reports_in(0, i64::MAX).len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn posted_burst_triggers_one_posthoc() {
    let h = start(None).await;
    for i in 0..15 {
        h.set_now(NOW - 3000 + i * 120);
        assert_eq!(h.submit(payload(4)).await.0, 200);
    }
    let cfg = config();
    let mut svc = Service::new(h.store.clone(), cfg.pipeline().unwrap(), cfg.notifier.clone()).unwrap();
    let sink = Arc::new(MemorySink::default());
    svc.add_sink(sink.clone());
    let out = tokio::task::spawn_blocking(move || {
        let a = scheduler_step(&svc, None, None, NOW);
        let b = scheduler_step(&svc, None, None, NOW + 900);
        (a, b)
    })
    .await
    .unwrap();
    assert_eq!(out.0.dispatched.len() + out.1.dispatched.len(), 1);
    let sent = sink.delivered();
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].kind, NotificationKind::Posthoc);
    assert_eq!(sent[0].message, POSTHOC_MESSAGE);
    let (_, log) = h.get("/notifications").await;
    assert!(log.contains("POSTHOC"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn webhook_posts_json() {
    let got: Arc<Mutex<Vec<Value>>> = Arc::default();
    let g = got.clone();
    let app = Router::new().route(
        "/hook",
        post(move |axum::Json(v): axum::Json<Value>| {
            let g = g.clone();
            async move {
                g.lock().unwrap().push(v);
                "ok"
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/hook", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let n = Notification::new(NotificationKind::Predictive, NOW);
    let sent = n.clone();
    tokio::task::spawn_blocking(move || WebhookSink::new(url).deliver(&sent))
        .await
        .unwrap()
        .unwrap();
    let v = got.lock().unwrap().clone();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0]["dedupe_key"], json!(n.dedupe_key));
    assert_eq!(v[0]["kind"], json!("PREDICTIVE"));
}
