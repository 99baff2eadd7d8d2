//! Gateway client: chat-completion calls with the audit retry/timeout policy.
//!
//! A call is retried on rate limiting, overload and transient server errors,
//! on attempt timeouts and on transport failures, up to `max_retries` retries
//! (16 attempts at the default of 15). The whole call, retries and backoff
//! included, is bounded by `total_timeout`, and its recorded wall time runs
//! from the first attempt to the final response or failure.

mod clock;
mod collect;
mod transport;
mod wire;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use collect::{collect, CollectPlan, CollectSummary, RecordKey, RecordSink};
pub use transport::{completions_url, HttpReply, HttpTransport, Transport, TransportError};
pub use wire::{
    ChatMessage, ChatRequest, ChatResponse, Choice, ChoiceMessage, PromptTokensDetails, Role,
    Usage, WireUsage,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayProfile {
    pub name: String,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub auth_env_var: String,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub pricing_ref: Option<String>,
}

fn default_concurrency() -> usize {
    4
}

impl GatewayProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_url.trim().is_empty() {
            return Err(format!("gateway {:?}: empty base_url", self.name));
        }
        if self.max_concurrency == 0 {
            return Err(format!(
                "gateway {:?}: max_concurrency must be >= 1",
                self.name
            ));
        }
        Ok(())
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
    /// Draw the delay uniformly from `[0, ceiling]` instead of sleeping the
    /// full ceiling.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_secs(1),
            factor: 2.0,
            cap: Duration::from_secs(60),
            jitter: true,
            seed: 0,
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Backoff {
            base: Duration::ZERO,
            ..Backoff::default()
        }
    }

    /// Upper bound of the delay after the given 0-based failed attempt.
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let exp = self.factor.powi(attempt.min(64) as i32);
        let secs = (self.base.as_secs_f64() * exp).min(self.cap.as_secs_f64());
        Duration::from_secs_f64(secs)
    }
}

/// Generation settings and the retry/timeout policy of one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub model: String,
    pub temperature: f64,
    pub total_timeout: Duration,
    pub attempt_timeout: Duration,
    pub max_retries: u32,
    /// Requests never enable vendor search or retrieval tools.
    pub retrieval_disabled: bool,
    /// Minimum spacing between repetitions of the same probe.
    pub repetition_spacing: Duration,
    pub backoff: Backoff,
    /// Workload tag sent as the request's `user` field.
    pub workload: Option<String>,
}

impl RequestParams {
    pub fn new(model: impl Into<String>) -> Self {
        RequestParams {
            model: model.into(),
            temperature: 0.7,
            total_timeout: Duration::from_secs(900),
            attempt_timeout: Duration::from_secs(300),
            max_retries: 15,
            retrieval_disabled: true,
            repetition_spacing: Duration::from_secs(7200),
            backoff: Backoff::default(),
            workload: None,
        }
    }

    pub fn for_model(&self, model: &str) -> Self {
        RequestParams {
            model: model.to_string(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.total_timeout.is_zero() {
            return Err("total_timeout must be positive".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        Ok(())
    }
}

/// Outcome of a single attempt: an HTTP status or a transport-level error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttemptOutcome {
    Status(u16),
    Error(AttemptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptError {
    Timeout,
    Transport,
    /// A success status with a body that is not a chat completion.
    Malformed,
}

impl fmt::Display for AttemptOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttemptOutcome::Status(s) => write!(f, "{s}"),
            AttemptOutcome::Error(AttemptError::Timeout) => f.write_str("timeout"),
            AttemptOutcome::Error(AttemptError::Transport) => f.write_str("transport"),
            AttemptOutcome::Error(AttemptError::Malformed) => f.write_str("malformed"),
        }
    }
}

pub const RETRYABLE_STATUSES: [u16; 6] = [429, 500, 502, 503, 504, 529];

/// Rate limiting, overload and transient server statuses, attempt timeouts
/// and transport failures are retryable; every other status is terminal.
pub fn is_retryable(outcome: &AttemptOutcome) -> bool {
    match outcome {
        AttemptOutcome::Status(s) => RETRYABLE_STATUSES.contains(s),
        AttemptOutcome::Error(_) => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum CallErrorKind {
    NonRetryable { status: u16 },
    RetriesExhausted,
    Timeout { elapsed: f64 },
    MissingCredential { var: String },
    InvalidRequest { reason: String },
}

impl fmt::Display for CallErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CallErrorKind::NonRetryable { status } => write!(f, "non-retryable status {status}"),
            CallErrorKind::RetriesExhausted => f.write_str("retries exhausted"),
            CallErrorKind::Timeout { elapsed } => write!(f, "call timed out after {elapsed:.3}s"),
            CallErrorKind::MissingCredential { var } => {
                write!(f, "credential variable {var} is unset or empty")
            }
            CallErrorKind::InvalidRequest { reason } => write!(f, "invalid request: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{kind} (attempts: {})", .status_history.len())]
pub struct CallError {
    #[serde(flatten)]
    pub kind: CallErrorKind,
    pub status_history: Vec<AttemptOutcome>,
    pub wall_time: f64,
}

impl CallError {
    pub fn attempt_count(&self) -> u32 {
        self.status_history.len() as u32
    }

    pub fn class(&self) -> &'static str {
        match self.kind {
            CallErrorKind::NonRetryable { .. } => "non_retryable",
            CallErrorKind::RetriesExhausted => "retries_exhausted",
            CallErrorKind::Timeout { .. } => "timeout",
            CallErrorKind::MissingCredential { .. } => "missing_credential",
            CallErrorKind::InvalidRequest { .. } => "invalid_request",
        }
    }
}

/// A successful chat completion with its call metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub usage: Usage,
    pub system_fingerprint: Option<String>,
    pub status_history: Vec<AttemptOutcome>,
    pub wall_time: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallFailure {
    pub class: String,
    pub message: String,
}

/// One gateway invocation for one probe repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub probe_id: String,
    pub repetition: u32,
    pub gateway: String,
    pub model: String,
    pub raw_text: String,
    pub usage: Usage,
    pub system_fingerprint: Option<String>,
    pub attempt_count: u32,
    pub status_history: Vec<AttemptOutcome>,
    pub wall_time: f64,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CallFailure>,
}

impl CallRecord {
    pub fn from_result(
        probe_id: &str,
        repetition: u32,
        gateway: &str,
        model: &str,
        result: Result<Completion, CallError>,
    ) -> Self {
        match result {
            Ok(c) => CallRecord {
                probe_id: probe_id.to_string(),
                repetition,
                gateway: gateway.to_string(),
                model: model.to_string(),
                raw_text: c.raw_text,
                usage: c.usage,
                system_fingerprint: c.system_fingerprint,
                attempt_count: c.status_history.len() as u32,
                status_history: c.status_history,
                wall_time: c.wall_time,
                timestamp: c.timestamp,
                error: None,
            },
            Err(e) => CallRecord {
                probe_id: probe_id.to_string(),
                repetition,
                gateway: gateway.to_string(),
                model: model.to_string(),
                raw_text: String::new(),
                usage: Usage::default(),
                system_fingerprint: None,
                attempt_count: e.attempt_count().max(1),
                error: Some(CallFailure {
                    class: e.class().to_string(),
                    message: e.to_string(),
                }),
                status_history: e.status_history,
                wall_time: e.wall_time,
                timestamp: Utc::now(),
            },
        }
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            gateway: self.gateway.clone(),
            model: self.model.clone(),
            probe_id: self.probe_id.clone(),
            repetition: self.repetition,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Where API keys come from.
#[derive(Debug, Clone, Default)]
pub enum KeySource {
    /// Read the profile's environment variable.
    #[default]
    Env,
    /// Fixed keys by variable name (tests, embedded simulators).
    Fixed(HashMap<String, String>),
}

impl KeySource {
    fn resolve(&self, var: &str) -> Option<String> {
        let key = match self {
            KeySource::Env => std::env::var(var).ok(),
            KeySource::Fixed(map) => map.get(var).cloned(),
        };
        key.filter(|k| !k.is_empty())
    }

    pub fn fixed(var: &str, key: &str) -> Self {
        KeySource::Fixed(HashMap::from([(var.to_string(), key.to_string())]))
    }
}

pub struct GatewayClient {
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    keys: KeySource,
    jitter: Mutex<Option<ChaCha8Rng>>,
}

impl GatewayClient {
    pub fn new(transport: Arc<dyn Transport>, clock: Arc<dyn Clock>, keys: KeySource) -> Self {
        GatewayClient {
            transport,
            clock,
            keys,
            jitter: Mutex::new(None),
        }
    }

    /// HTTP transport, wall-clock time, keys from the environment.
    pub fn http() -> Self {
        Self::new(
            Arc::new(HttpTransport::new()),
            Arc::new(SystemClock::new()),
            KeySource::Env,
        )
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn backoff_delay(&self, backoff: &Backoff, attempt: u32) -> Duration {
        let ceiling = backoff.ceiling(attempt);
        if !backoff.jitter || ceiling.is_zero() {
            return ceiling;
        }
        let mut guard = self.jitter.lock().expect("jitter lock");
        let rng = guard.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(backoff.seed));
        Duration::from_secs_f64(rng.random_range(0.0..=ceiling.as_secs_f64()))
    }

    /// Sends one chat request under the retry/timeout policy.
    pub fn send_chat(
        &self,
        profile: &GatewayProfile,
        messages: &[ChatMessage],
        params: &RequestParams,
    ) -> Result<Completion, CallError> {
        let start = self.clock.now();
        let elapsed = || self.clock.now().saturating_sub(start);
        let fail = |kind, history: Vec<AttemptOutcome>, wall: Duration| CallError {
            kind,
            status_history: history,
            wall_time: wall.as_secs_f64(),
        };

        let Some(key) = self.keys.resolve(&profile.auth_env_var) else {
            return Err(fail(
                CallErrorKind::MissingCredential {
                    var: profile.auth_env_var.clone(),
                },
                Vec::new(),
                Duration::ZERO,
            ));
        };
        if messages.is_empty() {
            return Err(fail(
                CallErrorKind::InvalidRequest {
                    reason: "no messages".into(),
                },
                Vec::new(),
                Duration::ZERO,
            ));
        }
        let request = ChatRequest {
            model: params.model.clone(),
            messages: messages.to_vec(),
            temperature: params.temperature,
            user: params.workload.clone(),
        };

        let mut history = Vec::new();
        for attempt in 0..=params.max_retries {
            let spent = elapsed();
            if spent >= params.total_timeout {
                let kind = CallErrorKind::Timeout {
                    elapsed: spent.as_secs_f64(),
                };
                return Err(fail(kind, history, spent));
            }
            let budget = params.attempt_timeout.min(params.total_timeout - spent);
            let outcome = match self
                .transport
                .post_chat(&profile.base_url, &key, &request, budget)
            {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    match serde_json::from_str::<ChatResponse>(&reply.body) {
                        Ok(resp) => {
                            history.push(AttemptOutcome::Status(reply.status));
                            return Ok(Completion {
                                raw_text: resp.content().unwrap_or_default().to_string(),
                                usage: Usage::from_wire(resp.usage.as_ref()),
                                system_fingerprint: resp.system_fingerprint,
                                status_history: history,
                                wall_time: elapsed().as_secs_f64(),
                                timestamp: Utc::now(),
                            });
                        }
                        Err(_) => AttemptOutcome::Error(AttemptError::Malformed),
                    }
                }
                Ok(reply) => AttemptOutcome::Status(reply.status),
                Err(TransportError::Timeout) => AttemptOutcome::Error(AttemptError::Timeout),
                Err(TransportError::Connection(msg)) => {
                    log::debug!("{}: {msg}", profile.name);
                    AttemptOutcome::Error(AttemptError::Transport)
                }
            };
            history.push(outcome);
            if !is_retryable(&outcome) {
                let status = match outcome {
                    AttemptOutcome::Status(s) => s,
                    AttemptOutcome::Error(_) => 0,
                };
                return Err(fail(
                    CallErrorKind::NonRetryable { status },
                    history,
                    elapsed(),
                ));
            }
            if attempt == params.max_retries {
                break;
            }
            let delay = self.backoff_delay(&params.backoff, attempt);
            let remaining = params.total_timeout.saturating_sub(elapsed());
            if delay >= remaining {
                self.clock.sleep(remaining);
                let spent = elapsed();
                let kind = CallErrorKind::Timeout {
                    elapsed: spent.as_secs_f64(),
                };
                return Err(fail(kind, history, spent));
            }
            self.clock.sleep(delay);
        }
        Err(fail(CallErrorKind::RetriesExhausted, history, elapsed()))
    }
}
