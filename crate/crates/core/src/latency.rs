//! Latency distribution statistics per (gateway, model, probe category).
//!
//! Durations are end-to-end wall times of calls, retry and backoff overhead
//! included. Dispersion uses the sample standard deviation (n - 1) and
//! percentiles interpolate linearly at rank `q(n-1)+1` of the sorted samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::CallRecord;
use crate::error::{Error, Result};
use crate::probe::{Domain, ProbeSuite};
use crate::scalar::{mean, variance, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatencyKey {
    pub gateway: String,
    pub model: String,
    pub category: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySamples<F> {
    pub key: LatencyKey,
    pub durations: Vec<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats<F> {
    pub n: usize,
    pub min: F,
    pub max: F,
    pub mean: F,
    pub std: F,
    pub cv: F,
    pub p50: F,
    pub p90: F,
    pub p99: F,
    /// Fewer than two samples; std and cv are reported as zero.
    pub insufficient: bool,
}

/// Linear-interpolation percentile of already sorted samples, `q` in [0, 1].
pub fn percentile_sorted<F: Scalar>(sorted: &[F], q: F) -> F {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = q * F::of_usize(n - 1);
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(n - 1);
    let j = (i + 1).min(n - 1);
    let frac = h - lo;
    sorted[i] + frac * (sorted[j] - sorted[i])
}

pub fn compute_stats<F: Scalar>(durations: &[F]) -> Result<Stats<F>> {
    if durations.is_empty() {
        return Err(Error::EmptyInput("latency samples"));
    }
    if durations.iter().any(|d| !d.is_finite() || *d < F::zero()) {
        return Err(Error::InvalidArgument(
            "latency samples must be finite and non-negative".into(),
        ));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let mu = mean(&sorted);
    let std = variance(&sorted, 1).sqrt();
    let cv = if mu > F::zero() { std / mu } else { F::zero() };
    Ok(Stats {
        n,
        min: sorted[0],
        max: sorted[n - 1],
        mean: mu,
        std,
        cv,
        p50: percentile_sorted(&sorted, F::of(0.50)),
        p90: percentile_sorted(&sorted, F::of(0.90)),
        p99: percentile_sorted(&sorted, F::of(0.99)),
        insufficient: n < 2,
    })
}

/// True when the coefficient of variation reaches the threshold. A flag
/// signals instability only; it carries no claim about the cause.
pub fn flag_instability<F: Scalar>(stats: &Stats<F>, cv_threshold: F) -> bool {
    stats.cv >= cv_threshold
}

/// Groups successful call durations by (gateway, model, probe domain).
/// Records whose probe is missing from the suite are ignored.
pub fn group_records(records: &[CallRecord], suite: &ProbeSuite) -> Vec<LatencySamples<f64>> {
    let mut groups: BTreeMap<LatencyKey, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        let Some(probe) = suite.get(&r.probe_id) else {
            continue;
        };
        let key = LatencyKey {
            gateway: r.gateway.clone(),
            model: r.model.clone(),
            category: probe.domain,
        };
        groups.entry(key).or_default().push(r.wall_time);
    }
    groups
        .into_iter()
        .map(|(key, durations)| LatencySamples { key, durations })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples() {
        let s = compute_stats(&[5.0f64, 5.0, 5.0]).unwrap();
        assert_eq!(s.cv, 0.0);
        assert_eq!((s.min, s.max, s.p50), (5.0, 5.0, 5.0));
    }

    #[test]
    fn one_two_three() {
        let s = compute_stats(&[3.0f64, 1.0, 2.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.cv, 0.5);
        assert_eq!(s.p50, 2.0);
        assert!((s.p90 - 2.8).abs() < 1e-12);
        assert!((s.p99 - 2.98).abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_insufficient() {
        let s = compute_stats(&[4.0f32]).unwrap();
        assert!(s.insufficient);
        assert_eq!((s.std, s.cv, s.p99), (0.0, 0.0, 4.0));
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(
            compute_stats::<f64>(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn instability_threshold_is_inclusive() {
        let mut s = compute_stats(&[1.0f64, 1.0]).unwrap();
        assert!(!flag_instability(&s, 1.0));
        s.cv = 1.0;
        assert!(flag_instability(&s, 1.0));
        s.cv = 1.10;
        assert!(flag_instability(&s, 1.0));
    }
}
