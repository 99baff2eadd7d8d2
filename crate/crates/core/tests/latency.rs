use proptest::prelude::*;

use gwaudit_core::latency::{compute_stats, flag_instability};

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..500.0, 2..80)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Two-pass mean and sample standard deviation, written out longhand.
fn two_pass(xs: &[f64]) -> (f64, f64) {
    let mut total = 0.0;
    for x in xs {
        total += x;
    }
    let m = total / xs.len() as f64;
    let mut ss = 0.0;
    for x in xs {
        ss += (x - m) * (x - m);
    }
    (m, (ss / (xs.len() - 1) as f64).sqrt())
}

#[test]
fn small_worked_sample() {
    let s = compute_stats(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(s.cv, 0.5);
    assert_eq!(s.p50, 2.0);
    assert_eq!((s.min, s.max), (1.0, 3.0));
    assert!(!flag_instability(&s, 1.0));
}

#[test]
fn percentiles_interpolate_linearly() {
    let xs: Vec<f64> = (1..=11).map(f64::from).collect();
    let s = compute_stats(&xs).unwrap();
    assert_eq!(s.p50, 6.0);
    assert_eq!(s.p90, 10.0);
    assert!(close(s.p99, 10.9, 1e-12));
}

#[test]
fn one_sample_is_insufficient() {
    let s = compute_stats(&[4.0]).unwrap();
    assert!(s.insufficient);
    assert_eq!((s.std, s.cv), (0.0, 0.0));
    assert!(compute_stats::<f64>(&[]).is_err());
    assert!(compute_stats(&[1.0, -1.0]).is_err());
}

proptest! {
    #[test]
    fn scaling_leaves_cv_unchanged(xs in samples(), c in prop::sample::select(vec![0.1, 1.0, 10.0, 3.7])) {
        let a = compute_stats(&xs).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let b = compute_stats(&scaled).unwrap();
        prop_assert!(close(a.cv, b.cv, 1e-12), "{} vs {}", a.cv, b.cv);
        for (x, y) in [(a.min, b.min), (a.max, b.max), (a.mean, b.mean), (a.std, b.std), (a.p50, b.p50), (a.p90, b.p90), (a.p99, b.p99)] {
            prop_assert!(close(x * c, y, 1e-12), "{} * {c} vs {}", x, y);
        }
    }

    #[test]
    fn shifting_up_lowers_cv(xs in samples(), k in 0.5f64..100.0) {
        let a = compute_stats(&xs).unwrap();
        prop_assume!(a.std > 1e-9 * a.mean);
        let shifted: Vec<f64> = xs.iter().map(|x| x + k).collect();
        prop_assert!(compute_stats(&shifted).unwrap().cv < a.cv);
    }

    #[test]
    fn summary_is_ordered(xs in prop::collection::vec(0.0f64..1e4, 1..100)) {
        let s = compute_stats(&xs).unwrap();
        prop_assert!(s.min <= s.p50 && s.p50 <= s.p90 && s.p90 <= s.p99 && s.p99 <= s.max);
        prop_assert!(s.cv >= 0.0);
    }

    #[test]
    fn matches_two_pass_reference(xs in samples()) {
        let s = compute_stats(&xs).unwrap();
        let (m, sd) = two_pass(&xs);
        prop_assert!(close(s.mean, m, 1e-12));
        prop_assert!(close(s.std, sd, 1e-10));
        prop_assert!(close(s.cv, sd / m, 1e-10));
    }
}
