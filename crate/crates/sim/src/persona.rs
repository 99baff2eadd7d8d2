//! Model personas: seeded response generators with distinct behavioral
//! profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use gwaudit_core::client::{ChatMessage, Role};
use gwaudit_core::probe::{normalized_contains, AnswerRule, Domain, Probe};

use crate::seed::derive;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormal {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        rand_distr::LogNormal::new(self.mu, self.sigma)
            .map(|d| d.sample(rng))
            .unwrap_or(self.mu.exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub math: f64,
    pub gpqa: f64,
    pub factual: f64,
    pub geo: f64,
}

impl DomainAccuracy {
    pub fn uniform(p: f64) -> Self {
        DomainAccuracy {
            math: p,
            gpqa: p,
            factual: p,
            geo: p,
        }
    }

    pub fn get(&self, d: Domain) -> f64 {
        match d {
            Domain::Math => self.math,
            Domain::Gpqa => self.gpqa,
            Domain::Factual => self.factual,
            Domain::Geo => self.geo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub seed: u64,
    pub accuracy: DomainAccuracy,
    /// Inclusive range of reasoning steps.
    pub depth: [u32; 2],
    /// Characters per step.
    pub step_length_mean: f64,
    pub step_length_spread: f64,
    pub latex_prob: f64,
    pub numeric_prob: f64,
    pub parse_failure_prob: f64,
    /// Values above 1 wrap the object in proportionally longer prose.
    pub length_multiplier: f64,
    /// Seconds.
    pub latency: LogNormal,
}

impl Persona {
    fn profile(&self) -> Vec<f64> {
        vec![
            self.accuracy.math,
            self.accuracy.gpqa,
            self.accuracy.factual,
            self.accuracy.geo,
            self.depth[0] as f64,
            self.depth[1] as f64,
            self.step_length_mean,
            self.step_length_spread,
            self.latex_prob,
            self.numeric_prob,
            self.parse_failure_prob,
            self.length_multiplier,
            self.latency.mu,
            self.latency.sigma,
        ]
    }

    /// Number of profile parameters in which two personas differ.
    pub fn differing_parameters(&self, other: &Persona) -> usize {
        self.profile()
            .iter()
            .zip(other.profile())
            .filter(|(a, b)| **a != *b)
            .count()
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            self.accuracy.math,
            self.accuracy.gpqa,
            self.accuracy.factual,
            self.accuracy.geo,
            self.latex_prob,
            self.numeric_prob,
            self.parse_failure_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!(
                "persona {}: probabilities must lie in [0, 1]",
                self.name
            ));
        }
        if self.depth[0] > self.depth[1] {
            return Err(format!("persona {}: empty depth range", self.name));
        }
        if self.step_length_mean <= 0.0
            || self.step_length_spread < 0.0
            || self.length_multiplier <= 0.0
        {
            return Err(format!("persona {}: lengths must be positive", self.name));
        }
        if self.latency.sigma < 0.0 {
            return Err(format!("persona {}: latency sigma must be >= 0", self.name));
        }
        Ok(())
    }
}

const WORDS: [&str; 24] = [
    "the",
    "value",
    "follows",
    "from",
    "known",
    "relation",
    "which",
    "gives",
    "a",
    "result",
    "that",
    "we",
    "check",
    "against",
    "prior",
    "facts",
    "so",
    "each",
    "term",
    "is",
    "consistent",
    "with",
    "context",
    "here",
];

const WRONG_PLACES: [&str; 6] = [
    "Lake Victoria",
    "Mont Blanc",
    "Danube",
    "Kilimanjaro",
    "Ottawa",
    "Atacama",
];

fn filler(rng: &mut ChaCha8Rng, chars: usize) -> String {
    let mut s = String::with_capacity(chars + 12);
    while s.len() < chars {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    s.truncate(chars.max(1));
    s.trim_end().to_string()
}

fn wrong_answer(probe: &Probe, rng: &mut ChaCha8Rng) -> String {
    match probe.answer_rule {
        AnswerRule::NumericExact => match probe.reference_answer.trim().parse::<i64>() {
            Ok(v) => (v + rng.random_range(1..=9)).to_string(),
            Err(_) => "0".into(),
        },
        AnswerRule::MultipleChoiceLetter => {
            let reference = probe.reference_answer.trim().to_ascii_uppercase();
            let others: Vec<&str> = ["A", "B", "C", "D"]
                .into_iter()
                .filter(|l| !reference.contains(l))
                .collect();
            others[rng.random_range(0..others.len())].to_string()
        }
        AnswerRule::NormalizedStringContains => {
            let options: Vec<&str> = WRONG_PLACES
                .into_iter()
                .filter(|w| !normalized_contains(w, &probe.reference_answer))
                .collect();
            options[rng.random_range(0..options.len())].to_string()
        }
    }
}

/// A structured reply to a probe. Deterministic in (persona, question,
/// repetition index).
pub fn persona_answer(persona: &Persona, probe: &Probe, repetition: u32) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(
        persona.seed,
        &[
            b"answer",
            probe.question_text.as_bytes(),
            &repetition.to_le_bytes(),
        ],
    ));
    let correct = rng.random::<f64>() < persona.accuracy.get(probe.domain);
    let answer = if correct {
        probe.reference_answer.clone()
    } else {
        wrong_answer(probe, &mut rng)
    };
    let depth = rng.random_range(persona.depth[0]..=persona.depth[1]) as usize;
    let lengths = Normal::new(persona.step_length_mean, persona.step_length_spread)
        .unwrap_or_else(|_| Normal::new(persona.step_length_mean, 0.0).expect("zero spread"));
    let mut steps: Vec<String> = (0..depth)
        .map(|_| {
            let len = lengths.sample(&mut rng).round().max(8.0) as usize;
            filler(&mut rng, len)
        })
        .collect();
    if !steps.is_empty() && rng.random::<f64>() < persona.numeric_prob {
        let i = rng.random_range(0..steps.len());
        steps[i] = format!("{} {}", rng.random_range(2..100), steps[i]);
    }
    if !steps.is_empty() && rng.random::<f64>() < persona.latex_prob {
        let i = rng.random_range(0..steps.len());
        steps[i].push_str(" \\frac{a}{b}");
    }

    let body = if rng.random::<f64>() < persona.parse_failure_prob {
        match rng.random_range(0..3) {
            0 => format!("{} The answer is {answer}.", steps.join(". ")),
            1 => json!({"knowledge_path": steps.join(" "), "final_answer": answer}).to_string(),
            _ => json!({"knowledge_path": steps, "answer": answer}).to_string(),
        }
    } else {
        json!({"knowledge_path": steps, "final_answer": answer}).to_string()
    };
    let extra = ((persona.length_multiplier - 1.0).max(0.0) * 120.0).round() as usize;
    if extra == 0 {
        body
    } else {
        format!("Here is my reasoning, {}.\n{body}", filler(&mut rng, extra))
    }
}

fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let lower = text.to_lowercase();
    let at = lower.rfind(&marker.to_lowercase())?;
    let rest = text[at + marker.len()..].trim();
    let end = rest.find(['.', '!', '\n']).unwrap_or(rest.len());
    let v = rest[..end].trim();
    (!v.is_empty()).then_some(v)
}

/// A conversational reply that answers identity and preference questions
/// from whatever history it was given.
pub fn persona_chat(persona: &Persona, history: &[ChatMessage], repetition: u32) -> String {
    let last = history
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let earlier = || {
        history
            .iter()
            .filter(|m| m.role == Role::User && m.content != last)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
    };
    let lower = last.to_lowercase();
    if lower.contains("identity") && lower.contains('?') {
        let identity = earlier().iter().rev().find_map(|m| after(m, "You are a "));
        return match identity {
            Some(i) => format!("I am a {i}."),
            None => "I am a general-purpose assistant.".into(),
        };
    }
    if lower.contains("favorite toy") && lower.contains('?') {
        let pref = earlier()
            .iter()
            .rev()
            .find_map(|m| after(m, "favorite toy is "));
        return match pref {
            Some(p) => format!(
                "My favorite toy is {}.",
                p.strip_prefix("now ").unwrap_or(p)
            ),
            None => "I do not have a favorite toy.".into(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(
        persona.seed,
        &[b"chat", last.as_bytes(), &repetition.to_le_bytes()],
    ));
    let chars = (400.0 * persona.length_multiplier) as usize;
    format!("Noted. {}.", filler(&mut rng, chars))
}

/// Seven personas with well-separated profiles; the last is meant to stay
/// out of training as an unseen model.
pub fn roster() -> Vec<Persona> {
    let p = |name: &str,
             seed: u64,
             acc: f64,
             depth: [u32; 2],
             step: (f64, f64),
             latex: f64,
             numeric: f64,
             parse_fail: f64,
             mult: f64,
             mu: f64| Persona {
        name: name.into(),
        seed,
        accuracy: DomainAccuracy::uniform(acc),
        depth,
        step_length_mean: step.0,
        step_length_spread: step.1,
        latex_prob: latex,
        numeric_prob: numeric,
        parse_failure_prob: parse_fail,
        length_multiplier: mult,
        latency: LogNormal { mu, sigma: 0.25 },
    };
    vec![
        p(
            "atlas-large",
            101,
            0.95,
            [3, 4],
            (60.0, 8.0),
            0.05,
            0.3,
            0.0,
            1.0,
            0.2,
        ),
        p(
            "borealis-pro",
            202,
            0.75,
            [6, 8],
            (35.0, 6.0),
            0.6,
            0.7,
            0.02,
            1.0,
            -0.3,
        ),
        p(
            "cirrus-mini",
            303,
            0.55,
            [2, 3],
            (110.0, 15.0),
            0.0,
            0.1,
            0.05,
            1.6,
            -0.9,
        ),
        p(
            "dynamo-7b",
            404,
            0.85,
            [4, 6],
            (80.0, 25.0),
            0.3,
            0.9,
            0.25,
            1.2,
            0.0,
        ),
        p(
            "ember-lite",
            505,
            0.4,
            [9, 11],
            (25.0, 4.0),
            0.1,
            0.5,
            0.0,
            2.2,
            -1.2,
        ),
        p(
            "fjord-xl",
            606,
            0.9,
            [5, 5],
            (50.0, 3.0),
            0.9,
            0.2,
            0.1,
            1.0,
            0.5,
        ),
        p(
            "gale-unseen",
            707,
            0.65,
            [7, 7],
            (55.0, 12.0),
            0.0,
            1.0,
            0.0,
            1.0,
            -0.5,
        ),
    ]
}
