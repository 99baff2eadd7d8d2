//! The simulated gateway: request handling shared by the in-process
//! transport and the HTTP server.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rust_decimal::prelude::FromPrimitive;
use rust_decimal::Decimal;
use serde_json::json;

use gwaudit_core::billing::{expected_cost, Ledger, LedgerEntry, PricingTable, UsageAggregate};
use gwaudit_core::client::{
    ChatMessage, ChatRequest, ChatResponse, Choice, ChoiceMessage, Clock, HttpReply,
    PromptTokensDetails, Role, Transport, TransportError, WireUsage,
};
use gwaudit_core::probe::{extract_question, Probe, ProbeSuite};
use gwaudit_core::tokens::{ApproxTokenizer, Tokenizer, MESSAGE_OVERHEAD};
use gwaudit_core::Result;

use crate::persona::{persona_answer, persona_chat, Persona};
use crate::scenario::{Fault, Scenario};
use crate::seed::{derive, unit};

/// What the handler decided; the caller performs the delay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub reply: HttpReply,
    pub delay: Duration,
    /// Hold the connection until the client times out.
    pub hang: bool,
}

#[derive(Debug, Default)]
struct State {
    seq: u64,
    faults_used: usize,
    occurrences: HashMap<(String, u64), u32>,
    prefixes: HashMap<u64, HashSet<u64>>,
    charges: BTreeMap<(String, String), (Decimal, u64)>,
    substituted: u64,
    in_flight: usize,
    max_in_flight: usize,
}

/// Counters observable by tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub requests: u64,
    pub substituted: u64,
    pub max_in_flight: usize,
}

pub struct MockGateway {
    scenario: Scenario,
    probes: HashMap<String, Probe>,
    pricing: PricingTable,
    clock: Arc<dyn Clock>,
    tokenizer: ApproxTokenizer,
    state: Mutex<State>,
}

fn error_reply(status: u16, kind: &str, message: &str) -> HttpReply {
    HttpReply {
        status,
        body: json!({"error": {"message": message, "type": kind}}).to_string(),
    }
}

fn message_hash(acc: u64, m: &ChatMessage) -> u64 {
    let role = match m.role {
        Role::System => b"s",
        Role::User => b"u",
        Role::Assistant => b"a",
    };
    derive(acc, &[role, m.content.as_bytes()])
}

fn scale(n: u64, factor: f64) -> u64 {
    if factor == 1.0 {
        n
    } else {
        (n as f64 * factor).ceil() as u64
    }
}

impl MockGateway {
    pub fn new(
        scenario: Scenario,
        suite: Option<&ProbeSuite>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        scenario.validate()?;
        let probes = suite
            .map(|s| {
                s.probes
                    .iter()
                    .map(|p| (p.question_text.trim().to_string(), p.clone()))
                    .collect()
            })
            .unwrap_or_default();
        let pricing = PricingTable {
            prices: scenario.prices.clone(),
        };
        Ok(MockGateway {
            scenario,
            probes,
            pricing,
            clock,
            tokenizer: ApproxTokenizer,
            state: Mutex::new(State::default()),
        })
    }

    /// Loads the scenario file and its probe suite, if any.
    pub fn from_file(path: impl AsRef<std::path::Path>, clock: Arc<dyn Clock>) -> Result<Self> {
        let scenario = Scenario::load(path)?;
        let suite = match &scenario.suite {
            Some(p) => Some(gwaudit_core::probe::load_suite(p)?),
            None => None,
        };
        Self::new(scenario, suite.as_ref(), clock)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn stats(&self) -> GatewayStats {
        let s = self.state.lock().expect("state lock");
        GatewayStats {
            requests: s.seq,
            substituted: s.substituted,
            max_in_flight: s.max_in_flight,
        }
    }

    /// Charges billed so far, one entry per (model, workload).
    pub fn ledger(&self) -> Ledger {
        let s = self.state.lock().expect("state lock");
        Self::ledger_of(&self.scenario.name, &s)
    }

    fn ledger_of(gateway: &str, s: &State) -> Ledger {
        Ledger {
            entries: s
                .charges
                .iter()
                .map(|((model, workload), (charge, requests))| LedgerEntry {
                    gateway: gateway.to_string(),
                    model: model.clone(),
                    workload: workload.clone(),
                    charge_usd: *charge,
                    requests: *requests,
                })
                .collect(),
        }
    }

    pub fn ledger_path(&self) -> Option<&PathBuf> {
        self.scenario.ledger.as_ref()
    }

    fn truncate(&self, messages: &[ChatMessage]) -> Vec<ChatMessage> {
        let mut kept = messages.to_vec();
        if let Some(t) = self.scenario.misbehavior.truncation {
            while kept.len() > 1 && self.tokenizer.count_messages(&kept) > t.max_context_tokens {
                let first_dialog = kept
                    .iter()
                    .position(|m| m.role != Role::System)
                    .unwrap_or(0);
                if first_dialog >= kept.len() - 1 {
                    break;
                }
                kept.remove(first_dialog);
            }
        }
        kept
    }

    fn latency(&self, persona: &Persona, seq: u64) -> Duration {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(
            self.scenario.seed,
            &[b"latency", &seq.to_le_bytes()],
        ));
        let mode = match &self.scenario.misbehavior.latency {
            Some(l) if unit(self.scenario.seed, &[b"mixture", &seq.to_le_bytes()]) < l.weight => {
                l.mode
            }
            _ => persona.latency,
        };
        Duration::from_secs_f64((mode.sample(&mut rng) * self.scenario.latency_scale).max(0.0))
    }

    fn fingerprint(&self, persona: &Persona, turn: usize) -> Option<String> {
        let fp = &self.scenario.misbehavior.fingerprint;
        if fp.omit {
            return None;
        }
        let base = format!(
            "fp_{:010x}",
            derive(self.scenario.seed, &[b"fp", persona.name.as_bytes()]) >> 24
        );
        Some(match fp.churn_period_turns {
            Some(p) => format!("{base}_{}", (turn.max(1) - 1) / p as usize),
            None => base,
        })
    }

    /// Handles one chat-completions request without sleeping.
    pub fn prepare(&self, api_key: &str, request: &ChatRequest) -> Prepared {
        let mut st = self.state.lock().expect("state lock");
        let seq = st.seq;
        st.seq += 1;

        if let Some(fault) = self.scenario.faults.get(st.faults_used).copied() {
            st.faults_used += 1;
            if fault.status.is_some() || fault.timeout {
                return self.fault_reply(fault);
            }
            let mut p = self.serve(&mut st, seq, api_key, request);
            p.delay += Duration::from_millis(fault.delay_ms);
            return p;
        }
        self.serve(&mut st, seq, api_key, request)
    }

    fn fault_reply(&self, fault: Fault) -> Prepared {
        let status = fault.status.unwrap_or(504);
        Prepared {
            reply: error_reply(status, "injected_fault", "scheduled fault"),
            delay: Duration::from_millis(fault.delay_ms),
            hang: fault.timeout,
        }
    }

    fn serve(&self, st: &mut State, seq: u64, api_key: &str, request: &ChatRequest) -> Prepared {
        let immediate = |reply| Prepared {
            reply,
            delay: Duration::ZERO,
            hang: false,
        };
        let authorized = match &self.scenario.api_key {
            Some(k) => api_key == k,
            None => !api_key.is_empty(),
        };
        if !authorized {
            return immediate(error_reply(401, "authentication_error", "invalid api key"));
        }
        let Some(claimed) = self.scenario.persona(&request.model) else {
            return immediate(error_reply(
                404,
                "invalid_request_error",
                &format!("model {} does not exist", request.model),
            ));
        };
        if request.messages.is_empty() {
            return immediate(error_reply(
                400,
                "invalid_request_error",
                "messages must not be empty",
            ));
        }

        let served = match &self.scenario.misbehavior.substitution {
            Some(s)
                if unit(self.scenario.seed, &[b"substitution", &seq.to_le_bytes()])
                    < s.probability =>
            {
                st.substituted += 1;
                self.scenario.persona(&s.target).expect("validated target")
            }
            _ => claimed,
        };

        let turn = request
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .count();
        let messages = self.truncate(&request.messages);
        let last_user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let probe = extract_question(last_user).and_then(|q| self.probes.get(q.trim()));

        let content_key = derive(
            0,
            &[last_user.as_bytes(), &(messages.len() as u64).to_le_bytes()],
        );
        let occurrence = st
            .occurrences
            .entry((served.name.clone(), content_key))
            .or_insert(0);
        let repetition = *occurrence;
        *occurrence += 1;

        let text = match probe {
            Some(p) => persona_answer(served, p, repetition),
            None if extract_question(last_user).is_some() => {
                json!({"knowledge_path": ["The question is outside my notes."], "final_answer": "unknown"}).to_string()
            }
            None => persona_chat(served, &messages, repetition),
        };

        // prefix cache, keyed by conversation (first user message)
        let conv = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| derive(1, &[served.name.as_bytes(), m.content.as_bytes()]))
            .unwrap_or(0);
        let seen = st.prefixes.entry(conv).or_default();
        let mut acc = 0u64;
        let mut cached = 0u64;
        let mut hit = true;
        for (i, m) in messages.iter().enumerate() {
            acc = message_hash(acc, m);
            if hit && i + 1 < messages.len() && seen.contains(&acc) {
                cached += self.tokenizer.count(&m.content) + MESSAGE_OVERHEAD;
            } else {
                hit = false;
            }
            seen.insert(acc);
        }

        let billing = self.scenario.misbehavior.billing;
        let prompt = scale(
            self.tokenizer.count_messages(&messages),
            billing.token_overreport_factor,
        );
        let completion = scale(self.tokenizer.count(&text), billing.token_overreport_factor);
        let cached = if billing.suppress_cache {
            0
        } else {
            cached.min(prompt)
        };

        let workload = request.user.clone().unwrap_or_else(|| "default".into());
        if let Some(price) = self.pricing.lookup(&self.scenario.name, &request.model) {
            let usage = UsageAggregate::new(prompt as i64, cached as i64, completion as i64);
            if let Ok(cost) = expected_cost(&usage, price) {
                let markup = Decimal::from_f64(billing.markup_factor).unwrap_or(Decimal::ONE);
                let e = st
                    .charges
                    .entry((request.model.clone(), workload))
                    .or_insert((Decimal::ZERO, 0));
                e.0 += cost * markup;
                e.1 += 1;
                if let Some(path) = &self.scenario.ledger {
                    if let Err(err) = Self::ledger_of(&self.scenario.name, st).save(path) {
                        log::warn!("cannot write ledger {}: {err}", path.display());
                    }
                }
            }
        }

        let response = ChatResponse {
            id: format!("chatcmpl-{seq}"),
            object: "chat.completion".into(),
            model: request.model.clone(),
            choices: vec![Choice {
                index: 0,
                message: ChoiceMessage {
                    role: Role::Assistant,
                    content: Some(text),
                },
                finish_reason: Some("stop".into()),
            }],
            usage: Some(WireUsage {
                prompt_tokens: Some(prompt),
                completion_tokens: Some(completion),
                total_tokens: Some(prompt + completion),
                prompt_tokens_details: self.scenario.cache_supported.then_some(
                    PromptTokensDetails {
                        cached_tokens: Some(cached),
                    },
                ),
            }),
            system_fingerprint: self.fingerprint(served, turn),
        };
        Prepared {
            reply: HttpReply {
                status: 200,
                body: serde_json::to_string(&response).expect("response serializes"),
            },
            delay: self.latency(served, seq),
            hang: false,
        }
    }

    pub(crate) fn enter(&self) -> InFlight<'_> {
        let mut st = self.state.lock().expect("state lock");
        st.in_flight += 1;
        st.max_in_flight = st.max_in_flight.max(st.in_flight);
        InFlight(self)
    }

    pub(crate) fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }
}

pub(crate) struct InFlight<'a>(&'a MockGateway);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        if let Ok(mut st) = self.0.state.lock() {
            st.in_flight -= 1;
        }
    }
}

/// In-process delivery: the caller's thread sleeps the simulated latency.
impl Transport for MockGateway {
    fn post_chat(
        &self,
        _base_url: &str,
        api_key: &str,
        request: &ChatRequest,
        timeout: Duration,
    ) -> std::result::Result<HttpReply, TransportError> {
        let _guard = self.enter();
        let p = self.prepare(api_key, request);
        if p.hang || p.delay > timeout {
            self.clock.sleep(timeout);
            return Err(TransportError::Timeout);
        }
        self.clock.sleep(p.delay);
        Ok(p.reply)
    }
}
