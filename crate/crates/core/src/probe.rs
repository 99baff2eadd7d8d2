//! Probe definitions, probe-suite loading and the structured-output prompt.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::client::ChatMessage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Math,
    Gpqa,
    Factual,
    Geo,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Math, Domain::Gpqa, Domain::Factual, Domain::Geo];

    pub fn default_rule(self) -> AnswerRule {
        match self {
            Domain::Math => AnswerRule::NumericExact,
            Domain::Gpqa => AnswerRule::MultipleChoiceLetter,
            Domain::Factual | Domain::Geo => AnswerRule::NormalizedStringContains,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Math => "math",
            Domain::Gpqa => "gpqa",
            Domain::Factual => "factual",
            Domain::Geo => "geo",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerRule {
    NumericExact,
    MultipleChoiceLetter,
    NormalizedStringContains,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub id: String,
    pub domain: Domain,
    #[serde(rename = "question")]
    pub question_text: String,
    pub reference_answer: String,
    pub answer_rule: AnswerRule,
}

impl Probe {
    /// Builds a probe with the domain's default answer rule.
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        question: impl Into<String>,
        reference_answer: impl Into<String>,
    ) -> Self {
        Probe {
            id: id.into(),
            domain,
            question_text: question.into(),
            reference_answer: reference_answer.into(),
            answer_rule: domain.default_rule(),
        }
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidProbe {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.question_text.trim().is_empty() {
            return Err(invalid("empty question"));
        }
        if self.reference_answer.trim().is_empty() {
            return Err(invalid("empty reference answer"));
        }
        Ok(())
    }
}

/// On-disk probe entry; `answer_rule` falls back to the domain default.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeEntry {
    id: String,
    domain: Domain,
    question: String,
    reference_answer: String,
    #[serde(default)]
    answer_rule: Option<AnswerRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSuite {
    pub name: String,
    pub probes: Vec<Probe>,
    pub domain_counts: BTreeMap<Domain, usize>,
}

impl ProbeSuite {
    /// Validates probes and derives the per-domain counts.
    pub fn new(name: impl Into<String>, probes: Vec<Probe>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut dups: Vec<String> = Vec::new();
        for p in &probes {
            if !seen.insert(p.id.as_str()) && !dups.contains(&p.id) {
                dups.push(p.id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(Error::DuplicateProbeIds(dups));
        }
        for p in &probes {
            p.validate()?;
        }
        let mut domain_counts = BTreeMap::new();
        for p in &probes {
            *domain_counts.entry(p.domain).or_insert(0) += 1;
        }
        let suite = ProbeSuite {
            name: name.into(),
            probes,
            domain_counts,
        };
        for d in suite.empty_domains() {
            log::warn!("probe suite {:?} has no {d} probes", suite.name);
        }
        Ok(suite)
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Probe> {
        self.probes.iter().find(|p| p.id == id)
    }

    pub fn empty_domains(&self) -> Vec<Domain> {
        Domain::ALL
            .into_iter()
            .filter(|d| !self.domain_counts.contains_key(d))
            .collect()
    }
}

/// Loads and validates a probe file (a JSON array of probe objects).
pub fn load_suite(path: impl AsRef<Path>) -> Result<ProbeSuite> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ProbeEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let probes = entries
        .into_iter()
        .map(|e| Probe {
            answer_rule: e.answer_rule.unwrap_or_else(|| e.domain.default_rule()),
            id: e.id,
            domain: e.domain,
            question_text: e.question,
            reference_answer: e.reference_answer,
        })
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ProbeSuite::new(name, probes)
}

pub const SYSTEM_MESSAGE: &str = "You are a meticulous reasoning engine. Your task is to solve multi-step problems by thinking step-by-step and to clearly articulate your reasoning process. Your final output must be a single JSON object.";

const QUESTION_SLOT: &str = "{question_prompt_implicit}";

const USER_TEMPLATE: &str = r#"Based on the following question, provide your step-by-step reasoning path and the final answer.

Question: {question_prompt_implicit}

Required Output Format:
Your entire response must be a single JSON object containing the following two keys:

1. knowledge_path: An array of strings. Each string in the array should represent a distinct step in your reasoning process.

2. final_answer: A string containing the final answer.

Example:

Question: What is the highest geographic feature associated with the origin area of the Starbucks corporation?

Your Output should be:

{ "knowledge_path": ["Starbucks originated in Seattle, Washington.", "The highest geographic feature in the state of Washington is Mount Rainier."], "final_answer": "Mount Rainier" }

Now, please apply this reasoning process and format to the following question.

Question: {question_prompt_implicit}"#;

/// Marker preceding the question in the rendered user message.
pub const QUESTION_MARKER: &str = "Question: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnvelope {
    pub system_message: String,
    pub user_message: String,
    pub requires_structured_output: bool,
}

impl PromptEnvelope {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(&self.system_message),
            ChatMessage::user(&self.user_message),
        ]
    }
}

pub fn render_prompt(probe: &Probe) -> Result<PromptEnvelope> {
    if probe.question_text.trim().is_empty() {
        return Err(Error::InvalidProbe {
            id: probe.id.clone(),
            reason: "empty question".into(),
        });
    }
    Ok(PromptEnvelope {
        system_message: SYSTEM_MESSAGE.to_string(),
        user_message: USER_TEMPLATE.replace(QUESTION_SLOT, &probe.question_text),
        requires_structured_output: true,
    })
}

/// Recovers the question from a rendered user message (the text after the
/// last question marker).
pub fn extract_question(user_message: &str) -> Option<&str> {
    let at = user_message.rfind(QUESTION_MARKER)?;
    let q = user_message[at + QUESTION_MARKER.len()..].trim();
    (!q.is_empty()).then_some(q)
}

/// Lowercases, strips diacritics, replaces punctuation with spaces and
/// collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let cleaned: String = s
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Bidirectional containment of normalized strings; empty sides never match.
pub fn normalized_contains(a: &str, b: &str) -> bool {
    let (a, b) = (normalize_text(a), normalize_text(b));
    !a.is_empty() && !b.is_empty() && (a.contains(&b) || b.contains(&a))
}

enum Number {
    Int(i128),
    Real(f64),
}

fn parse_number(s: &str) -> Option<Number> {
    let t = s.trim().trim_matches('$').trim().trim_end_matches('.');
    if let Ok(i) = t.parse::<i128>() {
        return Some(Number::Int(i));
    }
    t.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .map(Number::Real)
}

fn numbers_equal(a: &Number, b: &Number) -> bool {
    match (a, b) {
        (Number::Int(x), Number::Int(y)) => x == y,
        (x, y) => {
            let f = |n: &Number| match *n {
                Number::Int(i) => i as f64,
                Number::Real(r) => r,
            };
            (f(x) - f(y)).abs() <= 1e-9
        }
    }
}

fn choice_letter(s: &str) -> Option<char> {
    let stripped: String = s
        .chars()
        .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation())
        .collect();
    let mut chars = stripped.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Checks a candidate answer against the probe's reference under its rule.
pub fn validate_answer(probe: &Probe, candidate: &str) -> bool {
    let reference = &probe.reference_answer;
    match probe.answer_rule {
        AnswerRule::NumericExact => match (parse_number(reference), parse_number(candidate)) {
            (Some(r), Some(c)) => numbers_equal(&r, &c),
            _ => false,
        },
        AnswerRule::MultipleChoiceLetter => {
            match (choice_letter(reference), choice_letter(candidate)) {
                (Some(r), Some(c)) => r == c,
                _ => false,
            }
        }
        AnswerRule::NormalizedStringContains => normalized_contains(reference, candidate),
    }
}

/// Looser check used when the answer is missing from the answer field:
/// does the reference show up anywhere in free text?
pub fn answer_appears_in(probe: &Probe, text: &str) -> bool {
    match probe.answer_rule {
        AnswerRule::NumericExact => {
            let Some(r) = parse_number(&probe.reference_answer) else {
                return false;
            };
            text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
                .filter_map(parse_number)
                .any(|n| numbers_equal(&r, &n))
        }
        AnswerRule::MultipleChoiceLetter => {
            let Some(r) = choice_letter(&probe.reference_answer) else {
                return false;
            };
            let upper = text.to_ascii_uppercase();
            upper.contains(&format!("({r})"))
        }
        AnswerRule::NormalizedStringContains => {
            let (r, t) = (
                normalize_text(&probe.reference_answer),
                normalize_text(text),
            );
            !r.is_empty() && t.contains(&r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(rule: AnswerRule, reference: &str) -> Probe {
        Probe {
            id: "p".into(),
            domain: Domain::Factual,
            question_text: "q?".into(),
            reference_answer: reference.into(),
            answer_rule: rule,
        }
    }

    #[test]
    fn numeric_leading_zeros() {
        let p = probe(AnswerRule::NumericExact, "042");
        assert!(validate_answer(&p, "42"));
        assert!(validate_answer(&p, "  042 "));
        assert!(!validate_answer(&p, "43"));
        assert!(!validate_answer(&p, "forty-two"));
        let r = probe(AnswerRule::NumericExact, "0.5");
        assert!(validate_answer(&r, "0.5000000000001"));
        assert!(!validate_answer(&r, "0.51"));
    }

    #[test]
    fn multiple_choice_normalization() {
        let p = probe(AnswerRule::MultipleChoiceLetter, "B");
        assert!(validate_answer(&p, "(b)"));
        assert!(validate_answer(&p, " B. "));
        assert!(!validate_answer(&p, "C"));
        assert!(!validate_answer(&p, "Bee"));
    }

    #[test]
    fn string_contains_both_ways() {
        let p = probe(AnswerRule::NormalizedStringContains, "Mount Rainier");
        assert!(validate_answer(&p, "The answer is Mount Rainier."));
        assert!(validate_answer(&p, "rainier"));
        assert!(validate_answer(&p, "MÓUNT   RAINIER!"));
        assert!(!validate_answer(&p, "Mount Hood"));
        assert!(!validate_answer(&p, "  ...  "));
    }

    #[test]
    fn rendered_prompt_embeds_question_twice() {
        let p = Probe::new("m1", Domain::Math, "What is 2+2?", "4");
        let env = render_prompt(&p).unwrap();
        assert_eq!(env.user_message.matches("What is 2+2?").count(), 2);
        assert!(env.user_message.contains("knowledge_path"));
        assert!(env.user_message.contains("final_answer"));
        assert!(env.user_message.contains("Mount Rainier"));
        assert!(!env.user_message.contains(QUESTION_SLOT));
        assert_eq!(env.system_message, SYSTEM_MESSAGE);
        assert!(env.requires_structured_output);
        assert_eq!(extract_question(&env.user_message), Some("What is 2+2?"));
    }

    #[test]
    fn empty_question_rejected() {
        let p = Probe::new("m1", Domain::Math, "", "4");
        assert!(matches!(render_prompt(&p), Err(Error::InvalidProbe { .. })));
    }

    #[test]
    fn duplicate_ids_listed() {
        let a = Probe::new("aime-01", Domain::Math, "q1", "1");
        let b = Probe::new("aime-01", Domain::Math, "q2", "2");
        match ProbeSuite::new("s", vec![a, b]) {
            Err(Error::DuplicateProbeIds(ids)) => assert_eq!(ids, vec!["aime-01".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fallback_search_in_text() {
        let m = Probe::new("m", Domain::Math, "q", "204");
        assert!(answer_appears_in(&m, "so the total is 204 apples"));
        assert!(!answer_appears_in(&m, "so the total is 2040"));
        let g = Probe::new("g", Domain::Gpqa, "q", "C");
        assert!(answer_appears_in(&g, "option (c) is right"));
        assert!(!answer_appears_in(&g, "Clearly"));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  I am a Toy-Expert! "), "i am a toy expert");
        assert_eq!(normalize_text("Zürich"), "zurich");
    }
}
