//! Repeated probe collection against one gateway.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CallRecord, GatewayClient, GatewayProfile, RequestParams};
use crate::error::Result;
use crate::jsonl::JsonlWriter;
use crate::probe::{render_prompt, Probe, ProbeSuite};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub gateway: String,
    pub model: String,
    pub probe_id: String,
    pub repetition: u32,
}

/// Receives records in completion order.
pub trait RecordSink {
    fn append(&mut self, record: &CallRecord) -> Result<()>;
}

impl RecordSink for Vec<CallRecord> {
    fn append(&mut self, record: &CallRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

impl RecordSink for JsonlWriter {
    fn append(&mut self, record: &CallRecord) -> Result<()> {
        self.write(record)
    }
}

pub struct CollectPlan<'a> {
    pub profile: &'a GatewayProfile,
    pub models: &'a [String],
    pub suite: &'a ProbeSuite,
    pub params: &'a RequestParams,
    pub repetitions: u32,
    /// Keys already collected successfully; these are skipped.
    pub done: &'a HashSet<RecordKey>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub skipped: usize,
}

struct Job<'a> {
    model: &'a str,
    probe: &'a Probe,
    repetition: u32,
}

/// Issues `repetitions` calls per probe per model. Up to
/// `profile.max_concurrency` calls are in flight; same-probe repetitions
/// start at least `repetition_spacing` apart. Records reach the sink one at a
/// time as calls finish, and failures are recorded rather than aborting.
pub fn collect(
    client: &GatewayClient,
    plan: &CollectPlan<'_>,
    sink: &mut dyn RecordSink,
) -> Result<CollectSummary> {
    if plan.repetitions == 0 {
        return Err(crate::Error::InvalidArgument(
            "repetitions must be >= 1".into(),
        ));
    }
    let mut summary = CollectSummary::default();
    let mut queue = VecDeque::new();
    for repetition in 0..plan.repetitions {
        for model in plan.models {
            for probe in &plan.suite.probes {
                let key = RecordKey {
                    gateway: plan.profile.name.clone(),
                    model: model.clone(),
                    probe_id: probe.id.clone(),
                    repetition,
                };
                if plan.done.contains(&key) {
                    summary.skipped += 1;
                } else {
                    queue.push_back(Job {
                        model,
                        probe,
                        repetition,
                    });
                }
            }
        }
    }
    summary.attempted = queue.len();

    let queue = Mutex::new(queue);
    let last_start: Mutex<HashMap<(&str, &str), Duration>> = Mutex::new(HashMap::new());
    let workers = plan
        .profile
        .max_concurrency
        .max(1)
        .min(summary.attempted.max(1));
    let (tx, rx) = mpsc::channel::<CallRecord>();

    let sink_result = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let last_start = &last_start;
            scope.spawn(move || loop {
                let Some(job) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                let clock = client.clock();
                let key = (job.model, job.probe.id.as_str());
                let wait = {
                    let mut starts = last_start.lock().expect("spacing lock");
                    let now = clock.now();
                    let ready = starts
                        .get(&key)
                        .map(|t| *t + plan.params.repetition_spacing)
                        .unwrap_or(now);
                    let begin = ready.max(now);
                    starts.insert(key, begin);
                    begin - now
                };
                if !wait.is_zero() {
                    clock.sleep(wait);
                }
                let params = plan.params.for_model(job.model);
                let result = render_prompt(job.probe)
                    .map_err(|e| super::CallError {
                        kind: super::CallErrorKind::InvalidRequest {
                            reason: e.to_string(),
                        },
                        status_history: Vec::new(),
                        wall_time: 0.0,
                    })
                    .and_then(|env| client.send_chat(plan.profile, &env.messages(), &params));
                let record = CallRecord::from_result(
                    &job.probe.id,
                    job.repetition,
                    &plan.profile.name,
                    job.model,
                    result,
                );
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut first_err = None;
        for record in rx {
            if record.succeeded() {
                summary.succeeded += 1;
            } else {
                summary.failed += 1;
            }
            if first_err.is_none() {
                if let Err(e) = sink.append(&record) {
                    first_err = Some(e);
                }
            }
        }
        first_err
    });
    match sink_result {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
