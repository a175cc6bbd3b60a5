use std::collections::HashMap;

use odorwatch_core::analytics::{
    activity_from_log, default_stopwords, heatmap_csv, ngram_frequency, segment_users, shares_csv, stats_csv,
    temporal_heatmap, UserActivity, UserGroup,
};
use odorwatch_core::domain::{
    InteractionEvent, InteractionKind, LocalCalendar, Rating, ReportId, SmellReport, ZipCode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 101 users whose sorted report and event counts put the quartiles at
/// (2, 4, 6) and (11, 21, 31), so median + SIQR cuts are (6, 31). Pairing
/// rotates the event order by 91 so that no user is inactive.
fn population() -> Vec<UserActivity> {
    let reports = |k: usize| -> u64 {
        match k {
            0..=9 => 0,
            10..=19 => 1,
            20..=25 => 2,
            26..=39 => 3,
            40..=50 => 4,
            51..=64 => 5,
            65..=75 => 6,
            _ => 7 + ((k - 76) * 9 / 24) as u64,
        }
    };
    let events = |k: usize| -> u64 {
        match k {
            0..=7 => 0,
            8..=24 => 5,
            25 => 11,
            26..=49 => 15,
            50 => 21,
            51..=74 => 25,
            75 => 31,
            76..=90 => 117 - (90 - k as u64) * 5,
            _ => 117 + (k as u64 - 90) * 3,
        }
    };
    (0..101)
        .map(|i| UserActivity::counts(format!("u{i:03}"), reports(i), events((i + 91) % 101)))
        .collect()
}

#[test]
fn engineered_population_gives_published_cuts() {
    let users = population();
    let mut r: Vec<u64> = users.iter().map(|u| u.reports).collect();
    let mut e: Vec<u64> = users.iter().map(|u| u.events).collect();
    r.sort();
    e.sort();
    // With 101 values every quartile position is an integer index.
    let cut = |v: &[u64]| v[50] as f64 + (v[75] - v[25]) as f64 / 2.0;
    assert_eq!((cut(&r), cut(&e)), (6.0, 31.0));

    let seg = segment_users(&users).unwrap();
    assert_eq!((seg.cuts.report_cut, seg.cuts.event_cut), (6.0, 31.0));
    let exemplar = users.iter().find(|u| (u.reports, u.events) == (16, 117)).unwrap();
    assert_eq!(seg.group_of(&exemplar.user), Some(UserGroup::Enthusiast));
    let total: f64 = seg.shares.iter().map(|s| s.users_pct).sum();
    assert!((total - 100.0).abs() < 1e-9);
    assert_eq!(seg.shares.iter().map(|s| s.users).sum::<usize>(), 101);
    for g in UserGroup::ALL {
        assert!(
            seg.shares.iter().find(|s| s.group == g).unwrap().users > 0,
            "{g:?} empty"
        );
    }
    assert!(seg.enthusiast_correlation.is_some());
    assert!(String::from_utf8(shares_csv(&seg))
        .unwrap()
        .starts_with("group,users_pct"));
    assert!(String::from_utf8(stats_csv(&seg)).unwrap().contains("ALL,"));
}

proptest! {
    #[test]
    fn groups_partition_active_users(counts in proptest::collection::vec((0u64..30, 0u64..200), 1..80)) {
        let users: Vec<UserActivity> = counts.iter().enumerate().map(|(i, &(r, e))| UserActivity::counts(i.to_string(), r, e)).collect();
        match segment_users(&users) {
            Err(_) => prop_assert!(users.iter().all(|u| !u.is_active())),
            Ok(seg) => {
                let active = users.iter().filter(|u| u.is_active()).count();
                prop_assert_eq!(seg.assignment.len(), active);
                let pct: f64 = seg.shares.iter().map(|s| s.users_pct).sum();
                prop_assert!((pct - 100.0).abs() < 1e-9);
                for (u, g) in &seg.assignment {
                    let a = users.iter().find(|x| &x.user == u).unwrap();
                    let expect = if a.reports as f64 > seg.cuts.report_cut && a.events as f64 > seg.cuts.event_cut {
                        UserGroup::Enthusiast
                    } else if a.events == 0 {
                        UserGroup::Contributor
                    } else if a.reports == 0 {
                        UserGroup::Observer
                    } else {
                        UserGroup::Explorer
                    };
                    prop_assert_eq!(*g, expect);
                }
            }
        }
    }

    #[test]
    fn ngram_counts_ignore_corpus_order(
        texts in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,5}", 0..20),
        seed in any::<u64>(),
        n in 1usize..=2,
    ) {
        let base = ngram_frequency(&texts, n, default_stopwords()).unwrap();
        let mut shuffled = texts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(ngram_frequency(&shuffled, n, default_stopwords()).unwrap(), base);
    }
}

#[test]
fn ngram_examples() {
    let sw = default_stopwords();
    let g = ngram_frequency(&["Rotten egg!", "rotten-egg smell"], 2, sw).unwrap();
    assert_eq!(g[0], ("rotten egg".into(), 2));
    assert!(ngram_frequency(&["it is what it is"], 1, sw).unwrap().is_empty());
    assert!(ngram_frequency::<&str>(&[], 1, sw).unwrap().is_empty());
    assert!(ngram_frequency(&["a"], 3, sw).is_err());
    // counts descend, then grams ascend
    let u = ngram_frequency(&["b a c", "c b", "c"], 1, sw).unwrap();
    assert_eq!(u, vec![("c".into(), 3), ("b".into(), 2)]);
}

fn report_at(t: i64, rating: i64) -> SmellReport {
    SmellReport {
        report_id: ReportId(t.to_string()),
        observed_at: t,
        zip_code: ZipCode::new("15213").unwrap(),
        rating: Rating::new(rating).unwrap(),
        smell_description: None,
        symptoms: None,
        notes: None,
        display_latitude: None,
        display_longitude: None,
    }
}

#[test]
fn heatmap_single_and_mean_cells() {
    let cal = LocalCalendar::default();
    // 2017-01-02 09:00 America/New_York is a Monday
    let mon9 = 1_483_365_600;
    let h = temporal_heatmap(&[report_at(mon9, 3)], &cal);
    assert_eq!(h.get(0, 9), Some(3.0));
    assert_eq!(h.cells.iter().flatten().filter(|c| c.is_some()).count(), 1);
    let h = temporal_heatmap(&[report_at(mon9, 2), report_at(mon9 + 60, 4)], &cal);
    assert_eq!(h.get(0, 9), Some(3.0));
    assert_eq!(String::from_utf8(heatmap_csv(&h)).unwrap().lines().count(), 1 + 7 * 24);
}

#[test]
fn heatmap_matches_group_by_oracle() {
    let cal = LocalCalendar::default();
    let tz = jiff::tz::TimeZone::get("America/New_York").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reports: Vec<SmellReport> = (0..10_000)
        .map(|_| {
            report_at(
                1_483_246_800 + rng.random_range(0..2 * 365 * 86_400),
                rng.random_range(1..=5),
            )
        })
        .collect();
    let mut groups: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for r in &reports {
        let z = jiff::Timestamp::from_second(r.observed_at)
            .unwrap()
            .to_zoned(tz.clone());
        let day = z.weekday().to_monday_zero_offset() as usize;
        groups
            .entry((day, z.hour() as usize))
            .or_default()
            .push(r.rating.get() as f64);
    }
    let h = temporal_heatmap(&reports, &cal);
    for d in 0..7 {
        for hr in 0..24 {
            let want = groups.get(&(d, hr)).map(|v| v.iter().sum::<f64>() / v.len() as f64);
            match (h.get(d, hr), want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("cell ({d},{hr}) {other:?}"),
            }
        }
    }
}

#[test]
fn activity_from_interaction_log() {
    let mut r = report_at(7200, 5);
    r.smell_description = Some("rotten egg".into());
    let ev = |u: &str, hit: i64, data: Option<i64>, kind| InteractionEvent {
        anon_user_id: u.into(),
        hit_at: hit,
        data_at: data,
        kind,
    };
    let log = vec![
        ev("a", 7200, Some(7200), InteractionKind::ReportSubmit),
        ev("a", 10_800, Some(0), InteractionKind::Playback),
        ev("b", 100, None, InteractionKind::Other),
    ];
    let act = activity_from_log(&log, &[r]);
    assert_eq!(act.len(), 2);
    assert_eq!((act[0].reports, act[0].events), (1, 1));
    assert_eq!(act[0].report_chars, vec![9]);
    assert_eq!(act[0].hours_diff, vec![3.0]);
    assert_eq!((act[1].reports, act[1].events, act[1].hours_diff.len()), (0, 1, 0));
}
