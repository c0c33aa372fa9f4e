//! Metrics against an independent tally.

mod common;

use common::{random_traces, tally};
use metacrs::harness::{compute_metrics, MetricsReport};

#[test]
fn metrics_match_tally_on_random_traces() {
    for seed in 0..3 {
        let eps = random_traces(1000, 10, seed);
        let m = compute_metrics(&eps, 10).unwrap();
        let (sr, at) = tally(&eps, 10);
        assert_eq!(m.n, 1000);
        assert_eq!(m.sr_at, sr);
        assert_eq!(m.at, at);
    }
}

#[test]
fn shorter_horizon_counts_late_successes_as_failures() {
    let eps = random_traces(500, 10, 9);
    let m = compute_metrics(&eps, 4).unwrap();
    let (sr, at) = tally(&eps, 4);
    assert_eq!((m.sr_at, m.at), (sr, at));
}

#[test]
fn per_user_report_sums_to_total() {
    let eps = random_traces(300, 10, 4);
    let r = MetricsReport::from_episodes(&eps, 10).unwrap();
    assert_eq!(r.per_user.iter().map(|u| u.n).sum::<usize>(), 300);
    let json = r.to_json().unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}
