use odorwatch_core::evaluation::{
    event_confusion, event_confusion_timed, merge_events, ClipOrder, DaytimePolicy, EventConfusion,
};
use proptest::prelude::*;

/// Hour sets of events found the slow way: scan for starts, walk to ends,
/// then apply the window in the requested order.
fn oracle_events(flags: &[bool], local: &[u8], w: (u8, u8), order: ClipOrder) -> Vec<Vec<usize>> {
    let inside = |i: usize| local[i] >= w.0 && local[i] < w.1;
    let series: Vec<bool> = match order {
        ClipOrder::MergeThenClip => flags.to_vec(),
        ClipOrder::ClipThenMerge => (0..flags.len()).map(|i| flags[i] && inside(i)).collect(),
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < series.len() {
        if series[i] {
            let mut j = i;
            while j + 1 < series.len() && series[j + 1] {
                j += 1;
            }
            let hours: Vec<usize> = (i..=j)
                .filter(|&k| order == ClipOrder::ClipThenMerge || inside(k))
                .collect();
            if !hours.is_empty() {
                out.push(hours);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn overlaps(a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|x| b.contains(x))
}

fn oracle(truth: &[bool], pred: &[bool], local: &[u8], p: &DaytimePolicy) -> EventConfusion {
    let t = oracle_events(truth, local, p.truth_hours, p.order);
    let q = oracle_events(pred, local, p.issue_hours, p.order);
    let mut c = EventConfusion::default();
    for e in &q {
        if t.iter().any(|f| overlaps(e, f)) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for f in &t {
        if q.iter().any(|e| overlaps(e, f)) {
            c.truth_hit += 1;
        } else {
            c.fn_ += 1;
        }
    }
    c
}

fn series(len: usize, rate: f64) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(proptest::bool::weighted(rate), len)
}

fn case() -> impl Strategy<Value = (Vec<bool>, Vec<bool>, u8)> {
    (1usize..=200, 0.05f64..=0.2, 0.05f64..=0.2, 0u8..24)
        .prop_flat_map(|(n, rt, rp, start)| (series(n, rt), series(n, rp), Just(start)))
}

fn locals(n: usize, start: u8) -> Vec<u8> {
    (0..n).map(|i| ((start as usize + i) % 24) as u8).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn matches_oracle_merge_then_clip((t, p, s) in case()) {
        let local = locals(t.len(), s);
        let policy = DaytimePolicy::default();
        prop_assert_eq!(event_confusion(&t, &p, &local, &policy), oracle(&t, &p, &local, &policy));
    }

    #[test]
    fn matches_oracle_clip_then_merge((t, p, s) in case()) {
        let local = locals(t.len(), s);
        let policy = DaytimePolicy { order: ClipOrder::ClipThenMerge, ..DaytimePolicy::default() };
        prop_assert_eq!(event_confusion(&t, &p, &local, &policy), oracle(&t, &p, &local, &policy));
    }

    #[test]
    fn counts_partition_events((t, p, s) in case()) {
        let local = locals(t.len(), s);
        let c = event_confusion(&t, &p, &local, &DaytimePolicy::all_day());
        prop_assert_eq!(c.n_truth(), merge_events(&t).len() as u64);
        prop_assert_eq!(c.n_predicted(), merge_events(&p).len() as u64);
        for v in [c.precision(), c.recall(), c.fscore()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn identical_series_are_perfect() {
    let t = [false, true, true, false, true, false, false, true];
    let local = locals(t.len(), 8);
    let c = event_confusion(&t, &t, &local, &DaytimePolicy::all_day());
    assert_eq!((c.fp, c.fn_), (0, 0));
    assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
}

#[test]
fn gap_in_timestamps_splits_an_event() {
    let hours = [0, 3600, 3 * 3600, 4 * 3600];
    let flags = [true; 4];
    let local = [10, 11, 13, 14];
    let c = event_confusion_timed(&hours, &local, &flags, &flags, &DaytimePolicy::all_day());
    assert_eq!(c.n_truth(), 2);
}

#[test]
fn constant_negative_prediction_has_zero_recall() {
    let t = [true, true, false, true];
    let c = event_confusion(&t, &[false; 4], &locals(4, 9), &DaytimePolicy::all_day());
    assert_eq!((c.recall(), c.fscore(), c.fn_), (0.0, 0.0, 2));
}
