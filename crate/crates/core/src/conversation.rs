//! The 25-turn memory protocol: script, execution, checkpoint scoring and
//! aggregation of pass counts, fingerprint count and cache rate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::billing::UsageAggregate;
use crate::client::{
    CallFailure, ChatMessage, GatewayClient, GatewayProfile, RequestParams, Usage,
};
use crate::error::{Error, Result};
use crate::jsonl::{read_all, JsonlWriter};
use crate::probe::normalize_text;
use crate::tokens::Tokenizer;

pub const TURNS: usize = 25;
pub const CHECKPOINTS: [usize; 3] = [10, 24, 25];
pub const UPDATE_TURN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnPurpose {
    Assign,
    Distractor,
    Checkpoint,
    Update,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub purpose: TurnPurpose,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationScript {
    pub identity: String,
    pub initial_pref: String,
    pub updated_pref: String,
    pub turns: Vec<ScriptTurn>,
}

const PLASTICS: [&str; 8] = [
    "Discuss properties of plastics used in consumer goods.",
    "Summarize trade offs among durability, weight, and cost for common plastics.",
    "Which plastics are typical for food containers, and why?",
    "How does polycarbonate compare with ABS for impact resistance?",
    "What limits the recyclability of mixed plastic parts?",
    "Explain in two sentences why some plastics turn brittle in the cold.",
    "Name three additives used to stabilize plastics against UV light.",
    "Briefly compare injection molding and blow molding.",
];

const VEHICLES: [&str; 12] = [
    "Answer short questions about electric vehicles. What is regenerative braking?",
    "Why do most fast chargers slow down above 80% state of charge?",
    "What does a battery's kWh rating measure?",
    "Compute a simple battery charging time using t = C × (0.8 − 0.2) / (P × η) for C = 60 kWh, P = 11 kW and η = 0.9.",
    "How does cold weather affect electric vehicle range?",
    "What is the difference between AC and DC charging?",
    "Using the same formula, what is t for C = 80 kWh, P = 50 kW and η = 0.92?",
    "Name two common lithium-ion cathode chemistries used in cars.",
    "What is a heat pump used for in an electric vehicle?",
    "Why is charging efficiency below 100%?",
    "Roughly how long does a 7 kW home charger take to add 20 kWh, ignoring losses?",
    "In one sentence, what does vehicle-to-grid mean?",
];

impl ConversationScript {
    /// The standard protocol: assignment, plastics distractors, identity
    /// checkpoint, preference update, vehicle questions with light
    /// arithmetic, then identity and preference checkpoints.
    pub fn standard() -> Self {
        let turn = |purpose, text: &str| ScriptTurn {
            purpose,
            text: text.to_string(),
        };
        let mut turns = vec![turn(
            TurnPurpose::Assign,
            "You are a toy expert. Your current favorite toy is LEGO.",
        )];
        turns.extend(PLASTICS.iter().map(|t| turn(TurnPurpose::Distractor, t)));
        turns.push(turn(
            TurnPurpose::Checkpoint,
            "What is your professional identity now?",
        ));
        turns.push(turn(
            TurnPurpose::Update,
            "Your favorite toy is now Transformers.",
        ));
        turns.extend(VEHICLES.iter().map(|t| turn(TurnPurpose::Distractor, t)));
        turns.push(turn(
            TurnPurpose::Checkpoint,
            "What is your professional identity?",
        ));
        turns.push(turn(
            TurnPurpose::Checkpoint,
            "What is your favorite toy now?",
        ));
        ConversationScript {
            identity: "toy expert".into(),
            initial_pref: "LEGO".into(),
            updated_pref: "Transformers".into(),
            turns,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("conversation script: {m}")));
        if self.turns.len() != TURNS {
            return bad("must have exactly 25 turns");
        }
        for (i, t) in self.turns.iter().enumerate() {
            let n = i + 1;
            let expected = if CHECKPOINTS.contains(&n) {
                TurnPurpose::Checkpoint
            } else if n == UPDATE_TURN {
                TurnPurpose::Update
            } else if n == 1 {
                TurnPurpose::Assign
            } else {
                TurnPurpose::Distractor
            };
            if t.purpose != expected {
                return bad(&format!("turn {n} must be {expected:?}"));
            }
            if t.text.trim().is_empty() {
                return bad(&format!("turn {n} is empty"));
            }
        }
        if self.identity.trim().is_empty()
            || self.initial_pref.trim().is_empty()
            || self.updated_pref.trim().is_empty()
        {
            return bad("identity and preferences must be non-empty");
        }
        Ok(())
    }
}

/// One turn of one run; persisted one per JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub gateway: String,
    pub model: String,
    pub run_id: u32,
    /// 1-based.
    pub turn: u32,
    pub user_message: String,
    pub reply_text: String,
    pub system_fingerprint: Option<String>,
    pub usage: Usage,
    /// Prompt tokens of the request as counted locally.
    pub local_prompt_tokens: u64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CallFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub gateway: String,
    pub model: String,
    pub run_id: u32,
    pub turns: Vec<TurnRecord>,
}

impl Transcript {
    /// Turn at which the run stopped on a terminal failure.
    pub fn failed_at(&self) -> Option<u32> {
        self.turns
            .iter()
            .find(|t| t.error.is_some())
            .map(|t| t.turn)
    }

    pub fn is_complete(&self) -> bool {
        self.failed_at().is_none() && self.turns.len() == TURNS
    }

    pub fn reply(&self, turn: usize) -> Option<&str> {
        self.turns
            .iter()
            .find(|t| t.turn as usize == turn && t.error.is_none())
            .map(|t| t.reply_text.as_str())
    }

    /// Billed usage of every answered turn, failed runs included.
    pub fn usage(&self) -> UsageAggregate {
        self.turns
            .iter()
            .filter(|t| t.error.is_none())
            .map(|t| {
                UsageAggregate::new(
                    t.usage.prompt_tokens as i64,
                    t.usage.cached_tokens as i64,
                    t.usage.completion_tokens as i64,
                )
            })
            .sum()
    }
}

/// Runs the script once. Every request carries the full prior history; a
/// terminal failure ends the run and is recorded on the failing turn.
pub fn run_conversation(
    client: &GatewayClient,
    profile: &GatewayProfile,
    script: &ConversationScript,
    params: &RequestParams,
    run_id: u32,
    tokenizer: &dyn Tokenizer,
) -> Result<Transcript> {
    script.validate()?;
    let mut transcript = Transcript {
        gateway: profile.name.clone(),
        model: params.model.clone(),
        run_id,
        turns: Vec::with_capacity(TURNS),
    };
    let mut history: Vec<ChatMessage> = Vec::with_capacity(2 * TURNS);
    for (i, step) in script.turns.iter().enumerate() {
        history.push(ChatMessage::user(&step.text));
        let local_prompt_tokens = tokenizer.count_messages(&history) as u64;
        let mut record = TurnRecord {
            gateway: profile.name.clone(),
            model: params.model.clone(),
            run_id,
            turn: i as u32 + 1,
            user_message: step.text.clone(),
            reply_text: String::new(),
            system_fingerprint: None,
            usage: Usage::default(),
            local_prompt_tokens,
            wall_time: 0.0,
            error: None,
        };
        match client.send_chat(profile, &history, params) {
            Ok(c) => {
                history.push(ChatMessage::assistant(&c.raw_text));
                record.reply_text = c.raw_text;
                record.system_fingerprint = c.system_fingerprint;
                record.usage = c.usage;
                record.wall_time = c.wall_time;
                transcript.turns.push(record);
            }
            Err(e) => {
                log::warn!(
                    "run {run_id} of {}: failed at turn {}: {e}",
                    params.model,
                    i + 1
                );
                record.wall_time = e.wall_time;
                record.error = Some(CallFailure {
                    class: e.class().to_string(),
                    message: e.to_string(),
                });
                transcript.turns.push(record);
                break;
            }
        }
    }
    Ok(transcript)
}

/// Whole-word normalized containment.
pub fn mentions(text: &str, key: &str) -> bool {
    let key = normalize_text(key);
    if key.is_empty() {
        return false;
    }
    format!(" {} ", normalize_text(text)).contains(&format!(" {key} "))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointScores {
    pub t10: bool,
    pub t24: bool,
    pub t25: bool,
}

/// Identity recall at turns 10 and 24; at turn 25 the updated preference
/// must appear and the stale one must not.
pub fn score_checkpoints(transcript: &Transcript, script: &ConversationScript) -> CheckpointScores {
    let identity = |turn| {
        transcript
            .reply(turn)
            .is_some_and(|r| mentions(r, &script.identity))
    };
    CheckpointScores {
        t10: identity(10),
        t24: identity(24),
        t25: transcript.reply(25).is_some_and(|r| {
            mentions(r, &script.updated_pref) && !mentions(r, &script.initial_pref)
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run_id: u32,
    pub turn: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationMetrics {
    pub gateway: String,
    pub model: String,
    pub runs: usize,
    pub runs_effective: usize,
    pub t10: usize,
    pub t24: usize,
    pub t25: usize,
    /// Distinct non-null fingerprints; `None` when no reply carried one.
    pub fc: Option<usize>,
    /// Pooled cache rate in percent, one decimal; `None` without cache fields.
    pub cr: Option<f64>,
    pub failed: Vec<FailedRun>,
}

pub fn fingerprints<'a>(
    transcripts: impl IntoIterator<Item = &'a Transcript>,
) -> BTreeSet<&'a str> {
    transcripts
        .into_iter()
        .flat_map(|t| t.turns.iter())
        .filter_map(|t| t.system_fingerprint.as_deref())
        .collect()
}

/// Pooled cached/prompt ratio over turns that report cache fields.
pub fn cache_rate<'a>(transcripts: impl IntoIterator<Item = &'a Transcript>) -> Option<f64> {
    let (mut cached, mut prompt, mut reported) = (0u64, 0u64, false);
    for t in transcripts.into_iter().flat_map(|t| t.turns.iter()) {
        if t.error.is_some() || t.usage.usage_missing || t.usage.cache_unsupported {
            continue;
        }
        reported = true;
        cached += t.usage.cached_tokens;
        prompt += t.usage.prompt_tokens;
    }
    if !reported {
        return None;
    }
    let pct = if prompt == 0 {
        0.0
    } else {
        cached as f64 / prompt as f64 * 100.0
    };
    Some((pct * 10.0).round() / 10.0)
}

/// Aggregates runs of one (gateway, model). Incomplete runs are excluded
/// from every indicator and listed in `failed`.
pub fn aggregate_runs(
    transcripts: &[Transcript],
    script: &ConversationScript,
) -> Result<ConversationMetrics> {
    let first = transcripts
        .first()
        .ok_or(Error::EmptyInput("conversation runs"))?;
    let (complete, incomplete): (Vec<&Transcript>, Vec<&Transcript>) =
        transcripts.iter().partition(|t| t.is_complete());
    if complete.is_empty() {
        return Err(Error::EmptyInput("completed conversation runs"));
    }
    let scores: Vec<CheckpointScores> = complete
        .iter()
        .map(|t| score_checkpoints(t, script))
        .collect();
    let fps = fingerprints(complete.iter().copied());
    Ok(ConversationMetrics {
        gateway: first.gateway.clone(),
        model: first.model.clone(),
        runs: transcripts.len(),
        runs_effective: complete.len(),
        t10: scores.iter().filter(|s| s.t10).count(),
        t24: scores.iter().filter(|s| s.t24).count(),
        t25: scores.iter().filter(|s| s.t25).count(),
        fc: (!fps.is_empty()).then_some(fps.len()),
        cr: cache_rate(complete.iter().copied()),
        failed: incomplete
            .iter()
            .map(|t| FailedRun {
                run_id: t.run_id,
                turn: t.failed_at().unwrap_or(t.turns.len() as u32 + 1),
            })
            .collect(),
    })
}

pub fn write_transcript(writer: &mut JsonlWriter, transcript: &Transcript) -> Result<()> {
    transcript.turns.iter().try_for_each(|t| writer.write(t))
}

/// Regroups persisted turn lines into transcripts keyed by
/// (gateway, model, run id).
pub fn load_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>> {
    let lines: Vec<TurnRecord> = read_all(path)?;
    let mut runs: BTreeMap<(String, String, u32), Vec<TurnRecord>> = BTreeMap::new();
    for l in lines {
        runs.entry((l.gateway.clone(), l.model.clone(), l.run_id))
            .or_default()
            .push(l);
    }
    Ok(runs
        .into_iter()
        .map(|((gateway, model, run_id), mut turns)| {
            turns.sort_by_key(|t| t.turn);
            turns.dedup_by_key(|t| t.turn);
            Transcript {
                gateway,
                model,
                run_id,
                turns,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transcript(replies: &[(usize, &str)], fp: impl Fn(usize) -> Option<String>) -> Transcript {
        let turns = (1..=TURNS)
            .map(|n| TurnRecord {
                gateway: "g".into(),
                model: "m".into(),
                run_id: 0,
                turn: n as u32,
                user_message: String::new(),
                reply_text: replies
                    .iter()
                    .find(|(t, _)| *t == n)
                    .map(|(_, r)| r.to_string())
                    .unwrap_or_default(),
                system_fingerprint: fp(n),
                usage: Usage {
                    prompt_tokens: 100 * n as u64,
                    cached_tokens: 50 * n as u64,
                    completion_tokens: 10,
                    usage_missing: false,
                    cache_unsupported: false,
                },
                local_prompt_tokens: 0,
                wall_time: 0.1,
                error: None,
            })
            .collect();
        Transcript {
            gateway: "g".into(),
            model: "m".into(),
            run_id: 0,
            turns,
        }
    }

    fn passing() -> Transcript {
        transcript(
            &[
                (10, "I am a toy expert specializing in plastics."),
                (24, "A toy expert."),
                (25, "My favorite toy is now Transformers."),
            ],
            |_| Some("fp_a".into()),
        )
    }

    #[test]
    fn standard_script_is_valid() {
        let s = ConversationScript::standard();
        s.validate().unwrap();
        assert_eq!(
            s.turns[0].text,
            "You are a toy expert. Your current favorite toy is LEGO."
        );
        assert_eq!(s.turns[9].text, "What is your professional identity now?");
        assert_eq!(s.turns[10].text, "Your favorite toy is now Transformers.");
        assert!(s.turns[11..23]
            .iter()
            .any(|t| t.text.contains("(0.8 − 0.2)")));
    }

    #[test]
    fn reordered_script_is_rejected() {
        let mut s = ConversationScript::standard();
        s.turns.swap(9, 10);
        assert!(s.validate().is_err());
        s = ConversationScript::standard();
        s.turns.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn checkpoint_examples() {
        let s = ConversationScript::standard();
        assert_eq!(
            score_checkpoints(&passing(), &s),
            CheckpointScores {
                t10: true,
                t24: true,
                t25: true
            }
        );
        let stale = transcript(&[(25, "I still love LEGO.")], |_| None);
        assert!(!score_checkpoints(&stale, &s).t25);
        let both = transcript(&[(25, "Transformers, though LEGO was fun.")], |_| None);
        assert!(!score_checkpoints(&both, &s).t25);
    }

    #[test]
    fn mention_is_word_bounded() {
        assert!(mentions("I'm a TOY-expert!", "toy expert"));
        assert!(!mentions("legos", "LEGO"));
        assert!(!mentions("anything", ""));
    }

    #[test]
    fn aggregates_passing_runs() {
        let runs: Vec<Transcript> = (0..5)
            .map(|i| {
                let mut t = passing();
                t.run_id = i;
                t
            })
            .collect();
        let m = aggregate_runs(&runs, &ConversationScript::standard()).unwrap();
        assert_eq!((m.t10, m.t24, m.t25, m.fc), (5, 5, 5, Some(1)));
        assert_eq!(m.cr, Some(50.0));
        assert_eq!(m.runs_effective, 5);
    }

    #[test]
    fn churn_counts_distinct_fingerprints() {
        let t = transcript(&[], |n| Some(format!("fp_{}", (n - 1) / 5)));
        assert_eq!(fingerprints([&t]).len(), 5);
    }

    #[test]
    fn failed_runs_excluded() {
        let mut bad = passing();
        bad.run_id = 1;
        bad.turns.truncate(7);
        bad.turns[6].error = Some(CallFailure {
            class: "timeout".into(),
            message: "x".into(),
        });
        let m = aggregate_runs(&[passing(), bad.clone()], &ConversationScript::standard()).unwrap();
        assert_eq!(m.runs_effective, 1);
        assert_eq!(m.failed, vec![FailedRun { run_id: 1, turn: 7 }]);
        assert!(aggregate_runs(&[bad], &ConversationScript::standard()).is_err());
        assert!(aggregate_runs(&[], &ConversationScript::standard()).is_err());
    }

    #[test]
    fn cache_rate_cases() {
        let mut t = passing();
        for turn in &mut t.turns {
            turn.usage.cached_tokens = 0;
        }
        assert_eq!(cache_rate([&t]), Some(0.0));
        for turn in &mut t.turns {
            turn.usage.cache_unsupported = true;
        }
        assert_eq!(cache_rate([&t]), None);
    }

    #[test]
    fn transcript_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut w = JsonlWriter::append(&path).unwrap();
        let t = passing();
        write_transcript(&mut w, &t).unwrap();
        let back = load_transcripts(&path).unwrap();
        assert_eq!(back, vec![t]);
    }
}
