use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use proptest::prelude::*;

use gwaudit_core::client::{
    collect, AttemptOutcome, Backoff, CallRecord, ChatMessage, ChatRequest, Clock, CollectPlan,
    GatewayClient, GatewayProfile, HttpReply, KeySource, RequestParams, SystemClock, Transport,
    TransportError, VirtualClock,
};
use gwaudit_core::jsonl::{read_all, JsonlWriter};
use gwaudit_core::probe::{Domain, Probe, ProbeSuite};

#[derive(Debug, Clone, Copy)]
enum Step {
    Status(u16),
    Hang,
}

/// Plays a fixed list of outcomes, each after a delay, then succeeds.
struct Script {
    clock: Arc<dyn Clock>,
    steps: Mutex<VecDeque<(Step, Duration)>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl Script {
    fn new(clock: Arc<dyn Clock>, steps: Vec<(Step, Duration)>) -> Self {
        Script {
            clock,
            steps: Mutex::new(steps.into()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }
}

fn ok_body() -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": "ok"}}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 1}
    })
    .to_string()
}

impl Transport for Script {
    fn post_chat(
        &self,
        _: &str,
        _: &str,
        _: &ChatRequest,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let (step, delay) = self
            .steps
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or((Step::Status(200), Duration::ZERO));
        let result = match step {
            Step::Hang => {
                self.clock.sleep(timeout);
                Err(TransportError::Timeout)
            }
            Step::Status(status) => {
                self.clock.sleep(delay);
                Ok(HttpReply {
                    status,
                    body: if status == 200 {
                        ok_body()
                    } else {
                        "{}".into()
                    },
                })
            }
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

fn profile(max_concurrency: usize) -> GatewayProfile {
    GatewayProfile {
        name: "g".into(),
        base_url: "http://unused".into(),
        auth_env_var: "KEY".into(),
        models: vec!["m".into()],
        max_concurrency,
        pricing_ref: None,
    }
}

fn step() -> impl Strategy<Value = (Step, Duration)> {
    (
        prop_oneof![
            prop::sample::select(vec![429u16, 500, 502, 503, 504, 529, 400, 401, 404])
                .prop_map(Step::Status),
            Just(Step::Hang),
        ],
        (0u64..5_000).prop_map(Duration::from_millis),
    )
}

proptest! {
    #[test]
    fn attempts_match_history_and_time_covers_delays(steps in prop::collection::vec(step(), 0..20), jitter in any::<bool>()) {
        let clock = Arc::new(VirtualClock::new());
        let script = Script::new(clock.clone(), steps.clone());
        let client = GatewayClient::new(Arc::new(script), clock, KeySource::fixed("KEY", "k"));
        let mut params = RequestParams::new("m");
        params.backoff = Backoff { jitter, ..Backoff::default() };
        let (history, wall) = match client.send_chat(&profile(1), &[ChatMessage::user("hi")], &params) {
            Ok(c) => (c.status_history, c.wall_time),
            Err(e) => (e.status_history, e.wall_time),
        };
        prop_assert!(!history.is_empty() && history.len() <= 16);
        let consumed = &steps[..history.len().min(steps.len())];
        let injected: f64 = consumed
            .iter()
            .map(|(s, d)| match s {
                Step::Hang => params.attempt_timeout.as_secs_f64(),
                Step::Status(_) => d.as_secs_f64(),
            })
            .sum();
        prop_assert!(wall + 1e-9 >= injected.min(params.total_timeout.as_secs_f64()), "{wall} < {injected}");
        prop_assert!(wall <= params.total_timeout.as_secs_f64() + 1e-9);
        // only the final attempt may end on a non-retryable status
        for h in &history[..history.len() - 1] {
            prop_assert!(!matches!(h, AttemptOutcome::Status(400 | 401 | 404 | 200)), "{history:?}");
        }
    }
}

#[test]
fn collection_respects_the_concurrency_limit() {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let steps = vec![(Step::Status(200), Duration::from_millis(15)); 40];
    let script = Arc::new(Script::new(clock.clone(), steps));
    let client = GatewayClient::new(script.clone(), clock, KeySource::fixed("KEY", "k"));
    let probes: Vec<Probe> = (0..10)
        .map(|i| {
            Probe::new(
                format!("p{i}"),
                Domain::Factual,
                format!("question {i}"),
                "answer",
            )
        })
        .collect();
    let suite = ProbeSuite::new("s", probes).unwrap();
    let mut params = RequestParams::new("m");
    params.repetition_spacing = Duration::ZERO;
    let models = vec!["m".to_string()];
    let done = HashSet::new();
    let prof = profile(3);
    let plan = CollectPlan {
        profile: &prof,
        models: &models,
        suite: &suite,
        params: &params,
        repetitions: 4,
        done: &done,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let mut sink = JsonlWriter::append(&path).unwrap();
    let summary = collect(&client, &plan, &mut sink).unwrap();
    assert_eq!(summary.succeeded, 40);
    let peak = script.peak.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak {peak}");
    let records: Vec<CallRecord> = read_all(&path).unwrap();
    assert_eq!(records.len(), 40);
    assert!(records
        .iter()
        .all(|r| r.attempt_count as usize == r.status_history.len()));
}
