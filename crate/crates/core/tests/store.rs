use odorwatch_core::domain::{
    Channel, InteractionEvent, InteractionKind, Rating, ReportId, SensorReading, SmellReport, StationId, ZipCode,
};
use odorwatch_core::formats::{read_reports, write_reports};
use odorwatch_core::store::{DispatchRecord, Store};
use proptest::prelude::*;

fn report(i: usize, t: i64, rating: i64, text: Option<&str>) -> SmellReport {
    SmellReport {
        report_id: ReportId(format!("r{i}")),
        observed_at: t,
        zip_code: ZipCode::new("15213").unwrap(),
        rating: Rating::new(rating).unwrap(),
        smell_description: text.map(String::from),
        symptoms: Some("headache, \"bad\"".into()),
        notes: None,
        display_latitude: Some(40.44),
        display_longitude: Some(-79.95),
    }
}

proptest! {
    #[test]
    fn range_query_matches_filter(ts in proptest::collection::vec(0i64..1000, 0..50), a in 0i64..1100, b in 0i64..1100) {
        let s = Store::in_memory();
        let reports: Vec<SmellReport> = ts.iter().enumerate().map(|(i, &t)| report(i, t, 3, None)).collect();
        for r in &reports {
            s.append_report(r.clone()).unwrap();
        }
        let got: Vec<String> = s.reports_in(a, b).into_iter().map(|r| r.report_id.0).collect();
        let mut want: Vec<(i64, usize)> = reports.iter().enumerate().filter(|(_, r)| r.observed_at >= a && r.observed_at < b).map(|(i, r)| (r.observed_at, i)).collect();
        want.sort();
        let want: Vec<String> = want.into_iter().map(|(_, i)| format!("r{i}")).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn report_csv_round_trip(texts in proptest::collection::vec(proptest::option::of("[a-z ,\"]{1,12}"), 1..10)) {
        let reports: Vec<SmellReport> = texts.iter().enumerate()
            .map(|(i, t)| report(i, i as i64 * 60, 1 + (i % 5) as i64, t.as_deref().map(str::trim).filter(|s| !s.is_empty())))
            .collect();
        let mut buf = Vec::new();
        write_reports(&mut buf, &reports).unwrap();
        let back = read_reports(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), reports.len());
        for (a, b) in back.iter().zip(&reports) {
            prop_assert_eq!(a.observed_at, b.observed_at);
            prop_assert_eq!(a.rating, b.rating);
            prop_assert_eq!(&a.smell_description, &b.smell_description);
            prop_assert_eq!(&a.symptoms, &b.symptoms);
        }
        let mut again = Vec::new();
        write_reports(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }
}

#[test]
fn persisted_store_reopens_identically() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = Store::open(dir.path()).unwrap();
        s.append_report(report(0, 7200, 5, Some("industrial"))).unwrap();
        s.append_report(report(1, 3600, 2, None)).unwrap();
        s.append_readings(vec![SensorReading {
            station_id: StationId("a".into()),
            channel: Channel::H2s,
            observed_at: 3600,
            value: Some(2.5),
        }])
        .unwrap();
        s.append_interaction(InteractionEvent {
            anon_user_id: "u1".into(),
            hit_at: 9000,
            data_at: Some(3600),
            kind: InteractionKind::Playback,
        })
        .unwrap();
        s.append_dispatch(DispatchRecord {
            issued_at: 10,
            kind: "POSTHOC".into(),
            dedupe_key: "POSTHOC:0".into(),
        })
        .unwrap();
    }
    let s = Store::open(dir.path()).unwrap();
    let r = s.reports_in(0, 10_000);
    assert_eq!(r.len(), 2);
    assert_eq!(r[1].smell_description.as_deref(), Some("industrial"));
    assert_eq!(s.readings_in(0, 10_000).len(), 1);
    assert_eq!(s.interactions_in(0, 10_000).len(), 1);
    assert_eq!(s.dispatched().len(), 1);
    assert!(s
        .append_dispatch(DispatchRecord {
            issued_at: 11,
            kind: "POSTHOC".into(),
            dedupe_key: "POSTHOC:0".into()
        })
        .is_err());
}

#[test]
fn export_reimport_export_is_fixed_point() {
    let s = Store::in_memory();
    for i in 0..5 {
        s.append_report(report(i, 1000 + i as i64, 1 + i as i64, Some("rotten egg")))
            .unwrap();
    }
    let first = s.export_reports_csv().unwrap();
    let t = Store::in_memory();
    for r in read_reports(&first[..]).unwrap() {
        t.append_report(r).unwrap();
    }
    assert_eq!(t.export_reports_csv().unwrap(), first);
}

#[test]
fn model_blobs_are_saved_by_date() {
    let dir = tempfile::tempdir().unwrap();
    let s = Store::open(dir.path()).unwrap();
    let d1 = chrono::NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
    let d2 = chrono::NaiveDate::from_ymd_opt(2017, 1, 8).unwrap();
    s.save_model(d2, "cls-et", b"two").unwrap();
    s.save_model(d1, "cls-et", b"one").unwrap();
    assert_eq!(s.latest_model("cls-et").unwrap(), Some((d2, b"two".to_vec())));
}
