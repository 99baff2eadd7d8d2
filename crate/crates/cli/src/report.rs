//! Audit report: per gateway×model sections, anomaly flags and rendering.

use std::fmt::{self, Write as _};
use std::path::Path;

use anyhow::Result;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use gwaudit_core::billing::{round_cents, round_tenth, BillingReport, TokenConformance};
use gwaudit_core::conversation::ConversationMetrics;
use gwaudit_core::identifier::{ClaimLabel, ClaimReport};
use gwaudit_core::probe::Domain;
use gwaudit_core::LatencyStats;

use crate::config::FlagThresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Claim,
    Billing,
    Fingerprint,
    Latency,
    Cache,
    Memory,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Claim => "claim",
            Rule::Billing => "billing",
            Rule::Fingerprint => "fingerprint",
            Rule::Latency => "latency",
            Rule::Cache => "cache",
            Rule::Memory => "memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub gateway: String,
    pub model: String,
    pub rule: Rule,
    pub measured: f64,
    pub threshold: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimSummary {
    pub n: usize,
    pub claimed: usize,
    pub other: usize,
    pub none: usize,
    pub fraction: f64,
}

impl From<&ClaimReport> for ClaimSummary {
    fn from(r: &ClaimReport) -> Self {
        let claimed = r.count(&ClaimLabel::Claimed);
        let none = r.count(&ClaimLabel::None);
        ClaimSummary {
            n: r.per_record.len(),
            claimed,
            other: r.per_record.len() - claimed - none,
            none,
            fraction: r.fraction_claimed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BillingSection {
    Unavailable {
        reason: String,
    },
    Available {
        report: BillingReport,
        tokens: TokenConformance,
    },
}

impl BillingSection {
    pub fn gap_percent(&self) -> Option<f64> {
        match self {
            BillingSection::Available { report, .. } => report.gap_percent(),
            BillingSection::Unavailable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub category: Domain,
    pub stats: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub gateway: String,
    pub model: String,
    pub claim: Option<ClaimSummary>,
    pub conversation: Option<ConversationMetrics>,
    pub billing: BillingSection,
    pub latency: Vec<LatencyRow>,
    pub flags: Vec<Flag>,
}

impl Entry {
    pub fn max_cv(&self) -> Option<(Domain, f64)> {
        self.latency
            .iter()
            .filter(|r| !r.stats.insufficient)
            .map(|r| (r.category, r.stats.cv))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn rules(&self) -> Vec<Rule> {
        let mut r: Vec<Rule> = self.flags.iter().map(|f| f.rule).collect();
        r.sort();
        r.dedup();
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub label: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub inputs: Vec<InputDigest>,
    pub entries: Vec<Entry>,
}

impl AuditReport {
    pub fn flags(&self) -> impl Iterator<Item = &Flag> {
        self.entries.iter().flat_map(|e| e.flags.iter())
    }

    pub fn entry(&self, gateway: &str, model: &str) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.gateway == gateway && e.model == model)
    }
}

/// Applies every threshold rule to one entry. `baseline_cr` is the cache
/// rate the baseline gateway reported for the same model.
pub fn evaluate_flags(entry: &Entry, baseline_cr: Option<f64>, t: &FlagThresholds) -> Vec<Flag> {
    let mut flags = Vec::new();
    let mut push = |rule, measured: f64, threshold: f64, reason: String| {
        flags.push(Flag {
            gateway: entry.gateway.clone(),
            model: entry.model.clone(),
            rule,
            measured,
            threshold,
            reason,
        })
    };
    if let Some(c) = &entry.claim {
        if c.fraction < t.min_claim_fraction {
            push(
                Rule::Claim,
                c.fraction,
                t.min_claim_fraction,
                format!(
                    "claimed-model share {:.3} ({} of {}) below {:.2}",
                    c.fraction, c.claimed, c.n, t.min_claim_fraction
                ),
            );
        }
    }
    if let Some(gap) = entry.billing.gap_percent() {
        if gap > t.max_gap_percent {
            push(
                Rule::Billing,
                gap,
                t.max_gap_percent,
                format!("billing gap {gap:+.1}% above {:.1}%", t.max_gap_percent),
            );
        }
    }
    if let Some(m) = &entry.conversation {
        if let Some(fc) = m.fc {
            if fc > t.max_fingerprints {
                push(
                    Rule::Fingerprint,
                    fc as f64,
                    t.max_fingerprints as f64,
                    format!(
                        "{fc} distinct system fingerprints, at most {} expected",
                        t.max_fingerprints
                    ),
                );
            }
        }
        if let (Some(cr), Some(base)) = (m.cr, baseline_cr) {
            if cr == 0.0 && base > 0.0 {
                push(
                    Rule::Cache,
                    cr,
                    base,
                    format!("cache rate 0.0% while the baseline reports {base:.1}%"),
                );
            }
        }
        if m.runs_effective > 0 {
            let worst = m.t24.min(m.t25);
            let rate = worst as f64 / m.runs_effective as f64;
            if rate < t.min_memory_pass_rate {
                push(
                    Rule::Memory,
                    rate,
                    t.min_memory_pass_rate,
                    format!(
                        "late checkpoints passed in {}/{} and {}/{} runs, below {:.2}",
                        m.t24, m.runs_effective, m.t25, m.runs_effective, t.min_memory_pass_rate
                    ),
                );
            }
        }
    }
    if let Some((cat, cv)) = entry.max_cv() {
        if cv >= t.max_cv {
            push(
                Rule::Latency,
                cv,
                t.max_cv,
                format!("{cat} latency CV {cv:.3} at or above {:.2}", t.max_cv),
            );
        }
    }
    flags
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cents(d: Decimal) -> String {
    format!("{:.2}", round_cents(d))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    gateway: &'a str,
    model: &'a str,
    claim_fraction: String,
    t10: String,
    t24: String,
    t25: String,
    fc: String,
    cr: String,
    c_expected: String,
    c_actual: String,
    gap_percent: String,
    max_cv: String,
    flags: String,
}

#[derive(Serialize)]
struct ClaimRow<'a> {
    gateway: &'a str,
    model: &'a str,
    n: usize,
    claimed: usize,
    other: usize,
    none: usize,
    fraction: String,
}

#[derive(Serialize)]
struct ConversationRow<'a> {
    gateway: &'a str,
    model: &'a str,
    runs: usize,
    runs_effective: usize,
    t10: usize,
    t24: usize,
    t25: usize,
    fc: String,
    cr: String,
    failed: String,
}

#[derive(Serialize)]
struct BillingRow<'a> {
    gateway: &'a str,
    model: &'a str,
    status: &'a str,
    n_in: String,
    n_cached: String,
    n_out: String,
    c_expected: String,
    c_actual: String,
    gap_percent: String,
    local_prompt: String,
    local_completion: String,
    prompt_rel_diff: String,
    completion_rel_diff: String,
    tokens_conformant: String,
}

#[derive(Serialize)]
struct LatencyCsvRow<'a> {
    gateway: &'a str,
    model: &'a str,
    category: Domain,
    n: usize,
    mean: f64,
    std: f64,
    cv: f64,
    p50: f64,
    p90: f64,
    p99: f64,
}

fn conversation_row(m: &ConversationMetrics) -> ConversationRow<'_> {
    ConversationRow {
        gateway: &m.gateway,
        model: &m.model,
        runs: m.runs,
        runs_effective: m.runs_effective,
        t10: m.t10,
        t24: m.t24,
        t25: m.t25,
        fc: opt(m.fc),
        cr: m
            .cr
            .map(|c| format!("{c:.1}"))
            .unwrap_or_else(|| "n/a".into()),
        failed: m
            .failed
            .iter()
            .map(|f| format!("run{}@{}", f.run_id, f.turn))
            .collect::<Vec<_>>()
            .join(";"),
    }
}

fn billing_row<'a>(gateway: &'a str, model: &'a str, b: &'a BillingSection) -> BillingRow<'a> {
    match b {
        BillingSection::Unavailable { reason } => BillingRow {
            gateway,
            model,
            status: reason,
            n_in: String::new(),
            n_cached: String::new(),
            n_out: String::new(),
            c_expected: String::new(),
            c_actual: String::new(),
            gap_percent: String::new(),
            local_prompt: String::new(),
            local_completion: String::new(),
            prompt_rel_diff: String::new(),
            completion_rel_diff: String::new(),
            tokens_conformant: String::new(),
        },
        BillingSection::Available { report, tokens } => BillingRow {
            gateway,
            model,
            status: if report.c_actual.is_some() {
                "ok"
            } else {
                "no ledger"
            },
            n_in: report.usage.n_in.to_string(),
            n_cached: report.usage.n_cached.to_string(),
            n_out: report.usage.n_out.to_string(),
            c_expected: cents(report.c_expected),
            c_actual: opt(report.c_actual.map(cents)),
            gap_percent: opt(report.gap_percent().map(|g| format!("{g:+.1}"))),
            local_prompt: tokens.local.n_in.to_string(),
            local_completion: tokens.local.n_out.to_string(),
            prompt_rel_diff: format!("{:.4}", tokens.prompt_rel_diff),
            completion_rel_diff: format!("{:.4}", tokens.completion_rel_diff),
            tokens_conformant: tokens.conformant.to_string(),
        },
    }
}

pub fn write_conversation_csv<'a>(
    path: &Path,
    metrics: impl IntoIterator<Item = &'a ConversationMetrics>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(conversation_row(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_billing_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a str, &'a BillingSection)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (g, m, b) in rows {
        w.serialize(billing_row(g, m, b))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_latency_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a str, &'a [LatencyRow])>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (gateway, model, lat) in rows {
        for r in lat {
            let s = &r.stats;
            w.serialize(LatencyCsvRow {
                gateway,
                model,
                category: r.category,
                n: s.n,
                mean: s.mean,
                std: s.std,
                cv: s.cv,
                p50: s.p50,
                p90: s.p90,
                p99: s.p99,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

impl AuditReport {
    /// Writes `audit_report.csv`, the per-dimension tables, `audit_report.json`
    /// and `audit_summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("audit_report.csv"))?;
        for e in &self.entries {
            let conv = e.conversation.as_ref();
            let (c_exp, c_act) = match &e.billing {
                BillingSection::Available { report, .. } => {
                    (cents(report.c_expected), opt(report.c_actual.map(cents)))
                }
                BillingSection::Unavailable { .. } => (String::new(), String::new()),
            };
            w.serialize(SummaryRow {
                gateway: &e.gateway,
                model: &e.model,
                claim_fraction: opt(e.claim.map(|c| format!("{:.3}", c.fraction))),
                t10: opt(conv.map(|m| m.t10)),
                t24: opt(conv.map(|m| m.t24)),
                t25: opt(conv.map(|m| m.t25)),
                fc: opt(conv.and_then(|m| m.fc)),
                cr: opt(conv.and_then(|m| m.cr).map(|c| format!("{c:.1}"))),
                c_expected: c_exp,
                c_actual: c_act,
                gap_percent: opt(e.billing.gap_percent().map(|g| format!("{g:+.1}"))),
                max_cv: opt(e.max_cv().map(|(_, cv)| format!("{cv:.3}"))),
                flags: e
                    .rules()
                    .iter()
                    .map(Rule::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            })?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("claims.csv"))?;
        for e in &self.entries {
            if let Some(c) = &e.claim {
                w.serialize(ClaimRow {
                    gateway: &e.gateway,
                    model: &e.model,
                    n: c.n,
                    claimed: c.claimed,
                    other: c.other,
                    none: c.none,
                    fraction: format!("{:.3}", c.fraction),
                })?;
            }
        }
        w.flush()?;

        write_conversation_csv(
            &dir.join("conversation.csv"),
            self.entries.iter().filter_map(|e| e.conversation.as_ref()),
        )?;
        write_billing_csv(
            &dir.join("billing.csv"),
            self.entries
                .iter()
                .map(|e| (e.gateway.as_str(), e.model.as_str(), &e.billing)),
        )?;
        write_latency_csv(
            &dir.join("latency.csv"),
            self.entries
                .iter()
                .map(|e| (e.gateway.as_str(), e.model.as_str(), e.latency.as_slice())),
        )?;
        std::fs::write(
            dir.join("audit_report.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        std::fs::write(dir.join("audit_summary.txt"), self.summary_text())?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "gateway audit summary\n\ninputs:");
        for i in &self.inputs {
            let _ = writeln!(s, "  {:<12} {}  {}", i.label, i.sha256, i.path);
        }
        let _ = writeln!(s, "\nresults:");
        for e in &self.entries {
            let claim = e
                .claim
                .map(|c| format!("{:.3} ({}/{})", c.fraction, c.claimed, c.n))
                .unwrap_or_else(|| "n/a".into());
            let conv = e
                .conversation
                .as_ref()
                .map(|m| {
                    format!(
                        "T10/24/25 {}/{}/{} of {}  FC {}  CR {}",
                        m.t10,
                        m.t24,
                        m.t25,
                        m.runs_effective,
                        m.fc.map(|f| f.to_string()).unwrap_or_else(|| "n/a".into()),
                        m.cr.map(|c| format!("{c:.1}%"))
                            .unwrap_or_else(|| "n/a".into())
                    )
                })
                .unwrap_or_else(|| "conversation n/a".into());
            let bill = match &e.billing {
                BillingSection::Unavailable { reason } => format!("billing unavailable ({reason})"),
                BillingSection::Available { report, .. } => {
                    match (report.c_actual, report.gap_percent()) {
                        (Some(a), Some(g)) => format!(
                            "expected ${} actual ${} gap {:+.1}%",
                            cents(report.c_expected),
                            cents(a),
                            round_tenth(Decimal::try_from(g).unwrap_or_default())
                        ),
                        _ => format!("expected ${} (no actual charge)", cents(report.c_expected)),
                    }
                }
            };
            let cv = e
                .max_cv()
                .map(|(c, v)| format!("max CV {v:.3} ({c})"))
                .unwrap_or_else(|| "latency n/a".into());
            let _ = writeln!(
                s,
                "  {}/{}: claim {claim}; {conv}; {bill}; {cv}",
                e.gateway, e.model
            );
        }
        let flags: Vec<&Flag> = self.flags().collect();
        let _ = writeln!(s, "\nflags: {}", flags.len());
        for f in flags {
            let _ = writeln!(s, "  [{}] {}/{}: {}", f.rule, f.gateway, f.model, f.reason);
        }
        s
    }
}
