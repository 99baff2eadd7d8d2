//! Subcommand implementations. Every report is recomputed from the JSONL
//! files in the output directory, so `report` reproduces what `audit` wrote.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use gwaudit_core::billing::{
    expected_cost, token_conformance, Ledger, PricingTable, UsageAggregate,
};
use gwaudit_core::client::{collect, CallRecord, CollectPlan, CollectSummary, RecordKey};
use gwaudit_core::conversation::{
    aggregate_runs, load_transcripts, run_conversation, write_transcript, ConversationMetrics,
    ConversationScript, Transcript,
};
use gwaudit_core::identifier::{
    select_elite, split_dataset, train_ensemble, verify_claim, ClassifierStore, Difficulty,
    EliteSubset,
};
use gwaudit_core::jsonl::{read_all_or_empty, JsonlWriter};
use gwaudit_core::latency::{compute_stats, group_records};
use gwaudit_core::probe::{load_suite, ProbeSuite};
use gwaudit_core::signature::{build_matrix, ReferenceSet};
use gwaudit_core::tokens::{ApproxTokenizer, Tokenizer};
use gwaudit_core::ModelClassifier;

use crate::config::{GatewaySpec, RunConfig};
use crate::connect::{load_ledger, Connection, Layout};
use crate::report::{evaluate_flags, AuditReport, BillingSection, Entry, InputDigest, LatencyRow};

const PROBE_WORKLOAD: &str = "probe";
const CONVERSATION_WORKLOAD: &str = "conversation";

/// Reads a record log, keeping one record per key: the latest success, or
/// the latest failure when no attempt succeeded.
pub fn load_records(path: &Path) -> Result<Vec<CallRecord>> {
    let all: Vec<CallRecord> = read_all_or_empty(path)?;
    let mut by_key: BTreeMap<RecordKey, CallRecord> = BTreeMap::new();
    for r in all {
        let key = r.key();
        match by_key.get(&key) {
            Some(prev) if prev.succeeded() && !r.succeeded() => {}
            _ => {
                by_key.insert(key, r);
            }
        }
    }
    Ok(by_key.into_values().collect())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn baseline_records(cfg: &RunConfig, layout: &Layout) -> Result<Vec<CallRecord>> {
    let mut records = load_records(&layout.records())?;
    if let Some(b) = &cfg.baseline {
        records.retain(|r| &r.gateway == b);
    }
    if records.is_empty() {
        bail!(
            "no baseline records in {}; run collect first",
            layout.records().display()
        );
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CollectOutcome {
    pub gateway: String,
    pub summary: Option<CollectSummary>,
    pub error: Option<String>,
}

/// Collects the probe suite from the baseline gateway (or every gateway when
/// none is configured, or only `gateway` when given). Already collected
/// keys are skipped, so an interrupted run can simply be repeated.
pub fn cmd_collect(cfg: &RunConfig, gateway: Option<&str>) -> Result<Vec<CollectOutcome>> {
    let layout = Layout::new(&cfg.output_dir);
    let suite = load_suite(&cfg.suite)?;
    let targets: Vec<&GatewaySpec> = match gateway.or(cfg.baseline.as_deref()) {
        Some(name) => {
            vec![cfg
                .gateway(name)
                .ok_or_else(|| anyhow!("unknown gateway {name:?}"))?]
        }
        None => cfg.gateways.iter().collect(),
    };
    let done: HashSet<RecordKey> = load_records(&layout.records())?
        .iter()
        .filter(|r| r.succeeded())
        .map(CallRecord::key)
        .collect();
    let mut sink = JsonlWriter::append(layout.records())?;
    let mut outcomes = Vec::new();
    for spec in targets {
        let reps = if cfg.baseline.is_none() || cfg.is_baseline(spec.name()) {
            cfg.repetitions.baseline
        } else {
            cfg.repetitions.single_turn
        };
        let mut run = || -> Result<CollectSummary> {
            if spec.profile.models.is_empty() {
                bail!("no models configured");
            }
            let conn = Connection::open(spec)?;
            let params = cfg.request.params(cfg.seed, PROBE_WORKLOAD);
            let plan = CollectPlan {
                profile: &spec.profile,
                models: &spec.profile.models,
                suite: &suite,
                params: &params,
                repetitions: reps,
                done: &done,
            };
            let s = collect(&conn.client, &plan, &mut sink)?;
            if s.attempted > 0 && s.succeeded == 0 {
                bail!("all {} calls failed", s.attempted);
            }
            Ok(s)
        };
        let outcome = match run() {
            Ok(s) => CollectOutcome {
                gateway: spec.name().to_string(),
                summary: Some(s),
                error: None,
            },
            Err(e) => {
                log::error!("gateway {}: {e:#}", spec.name());
                CollectOutcome {
                    gateway: spec.name().to_string(),
                    summary: None,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        outcomes.push(outcome);
    }
    if outcomes.iter().all(|o| o.error.is_some()) {
        let detail: Vec<String> = outcomes
            .iter()
            .map(|o| format!("{}: {}", o.gateway, o.error.as_deref().unwrap_or("")))
            .collect();
        bail!(
            "collection failed for every gateway ({})",
            detail.join("; ")
        );
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub model: String,
    pub threshold: f64,
    pub difficulty: Difficulty,
    pub test_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub elite_probes: usize,
}

/// Builds signatures from the baseline records, trains one detector per
/// model (or only `model`) and stores it with its elite probe subset.
/// Stored detectors of other models are left as they are.
pub fn cmd_train(cfg: &RunConfig, model: Option<&str>) -> Result<Vec<TrainRow>> {
    let layout = Layout::new(&cfg.output_dir);
    let suite = load_suite(&cfg.suite)?;
    let records = baseline_records(cfg, &layout)?;
    let reference: ReferenceSet<f64> = ReferenceSet::from_records(&records, &suite);
    let models = reference.models();
    if models.len() < 2 {
        bail!(
            "training needs records from at least two models, found {}",
            models.len()
        );
    }
    let (matrix, skipped) = build_matrix(&records, &suite, &reference);
    if !skipped.is_empty() {
        log::warn!(
            "{} records skipped while building signatures",
            skipped.len()
        );
    }
    matrix.write_csv(layout.signatures())?;
    let split = split_dataset(&matrix.rows, &cfg.training)?;
    let targets = match model {
        Some(m) if models.iter().any(|x| x == m) => vec![m.to_string()],
        Some(m) => bail!("no baseline records for model {m:?}"),
        None => models,
    };
    let classifiers = train_ensemble(&split.train, &targets, &cfg.training)?;

    let store = ClassifierStore::open(layout.classifiers())?;
    let mut elite = store.load_elite().unwrap_or_default();
    let mut rows = Vec::new();
    for c in &classifiers {
        store.save(c)?;
        let subset = select_elite(
            c,
            &split.train,
            cfg.elite.q,
            cfg.elite.delta,
            cfg.elite.backfill,
        )?;
        let m = c.evaluate(&split.test);
        rows.push(TrainRow {
            model: c.model_name.clone(),
            threshold: c.threshold,
            difficulty: c.difficulty,
            test_positives: m.tp + m.fn_,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            elite_probes: subset.probe_ids.len(),
        });
        elite.insert(c.model_name.clone(), subset.probe_ids);
    }
    store.save_elite(&elite)?;
    let mut w = csv::Writer::from_path(layout.train_summary())?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

struct Gathered {
    records: Vec<CallRecord>,
    transcripts: Vec<Transcript>,
    ledger: Option<Ledger>,
}

fn run_conversations(
    cfg: &RunConfig,
    conn: &Connection,
    script: &ConversationScript,
) -> Result<Vec<Transcript>> {
    let params = cfg.request.params(cfg.seed, CONVERSATION_WORKLOAD);
    let mut out = Vec::new();
    for model in &conn.spec.profile.models {
        for run in 0..cfg.repetitions.conversation {
            out.push(run_conversation(
                &conn.client,
                &conn.spec.profile,
                script,
                &params.for_model(model),
                run,
                &ApproxTokenizer,
            )?);
        }
    }
    Ok(out)
}

fn gather(
    cfg: &RunConfig,
    spec: &GatewaySpec,
    suite: &ProbeSuite,
    elite: &BTreeMap<String, Vec<String>>,
    conversations: bool,
    probes: bool,
) -> Result<Gathered> {
    let conn = Connection::open(spec)?;
    let mut records: Vec<CallRecord> = Vec::new();
    if probes {
        let params = cfg.request.params(cfg.seed, PROBE_WORKLOAD);
        let done = HashSet::new();
        for model in &spec.profile.models {
            let ids = &elite[model];
            let probes = suite
                .probes
                .iter()
                .filter(|p| ids.contains(&p.id))
                .cloned()
                .collect();
            let sub = ProbeSuite::new(format!("{}/elite/{model}", suite.name), probes)?;
            let models = [model.clone()];
            let plan = CollectPlan {
                profile: &spec.profile,
                models: &models,
                suite: &sub,
                params: &params,
                repetitions: cfg.repetitions.single_turn,
                done: &done,
            };
            collect(&conn.client, &plan, &mut records)?;
        }
    }
    let transcripts = if conversations {
        run_conversations(cfg, &conn, &ConversationScript::standard())?
    } else {
        Vec::new()
    };
    Ok(Gathered {
        records,
        transcripts,
        ledger: conn.sim.as_ref().map(|g| g.ledger()),
    })
}

fn gather_all(
    cfg: &RunConfig,
    elite: &BTreeMap<String, Vec<String>>,
    conversations: bool,
    probes: bool,
) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let suite = load_suite(&cfg.suite)?;
    let results: Vec<Result<Gathered>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .gateways
            .iter()
            .map(|spec| {
                let suite = &suite;
                s.spawn(move || {
                    gather(cfg, spec, suite, elite, conversations, probes)
                        .with_context(|| format!("gateway {}", spec.name()))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(anyhow!("gateway worker panicked")))
            })
            .collect()
    });
    let gathered = results.into_iter().collect::<Result<Vec<_>>>()?;

    if probes {
        let _ = std::fs::remove_file(layout.audit_records());
        let mut w = JsonlWriter::append(layout.audit_records())?;
        for g in &gathered {
            g.records.iter().try_for_each(|r| w.write(r))?;
        }
    }
    if conversations {
        let _ = std::fs::remove_file(layout.transcripts());
        let mut w = JsonlWriter::append(layout.transcripts())?;
        for g in &gathered {
            g.transcripts
                .iter()
                .try_for_each(|t| write_transcript(&mut w, t))?;
        }
    }
    for (spec, g) in cfg.gateways.iter().zip(&gathered) {
        if let Some(l) = &g.ledger {
            let path = layout.sim_ledger(spec.name());
            std::fs::create_dir_all(path.parent().expect("ledger dir"))?;
            l.save(path)?;
        }
    }
    Ok(())
}

fn load_store(layout: &Layout) -> Result<(Vec<ModelClassifier>, BTreeMap<String, Vec<String>>)> {
    let store = ClassifierStore::open(layout.classifiers())?;
    let classifiers: Vec<ModelClassifier> = store.load_all()?;
    if classifiers.is_empty() {
        bail!("no classifiers in {}; run train first", store.dir.display());
    }
    let elite = store.load_elite().context("reading elite probe subsets")?;
    Ok((classifiers, elite))
}

/// Runs elite probes and conversations against every configured gateway,
/// then writes the report.
pub fn cmd_audit(cfg: &RunConfig) -> Result<AuditReport> {
    let layout = Layout::new(&cfg.output_dir);
    let (classifiers, elite) = load_store(&layout)?;
    for spec in &cfg.gateways {
        for m in &spec.profile.models {
            if !classifiers.iter().any(|c| &c.model_name == m) || !elite.contains_key(m) {
                bail!(
                    "no classifier for claimed model {m:?} (gateway {}); run train first",
                    spec.name()
                );
            }
        }
    }
    gather_all(cfg, &elite, true, true)?;
    cmd_report(cfg)
}

/// Runs only the conversation workload and writes `conversation.csv`.
pub fn cmd_converse(cfg: &RunConfig) -> Result<Vec<ConversationMetrics>> {
    let layout = Layout::new(&cfg.output_dir);
    gather_all(cfg, &BTreeMap::new(), true, false)?;
    let metrics = conversation_metrics(&load_transcripts(layout.transcripts())?)?;
    let list: Vec<ConversationMetrics> = metrics.into_values().collect();
    crate::report::write_conversation_csv(&layout.file("conversation.csv"), &list)?;
    Ok(list)
}

fn conversation_metrics(
    transcripts: &[Transcript],
) -> Result<BTreeMap<(String, String), ConversationMetrics>> {
    let script = ConversationScript::standard();
    let mut groups: BTreeMap<(String, String), Vec<Transcript>> = BTreeMap::new();
    for t in transcripts {
        groups
            .entry((t.gateway.clone(), t.model.clone()))
            .or_default()
            .push(t.clone());
    }
    let mut out = BTreeMap::new();
    for (k, runs) in groups {
        match aggregate_runs(&runs, &script) {
            Ok(m) => {
                out.insert(k, m);
            }
            Err(e) => log::warn!("{}/{}: {e}", k.0, k.1),
        }
    }
    Ok(out)
}

fn billing_section(
    spec: &GatewaySpec,
    model: &str,
    transcripts: &[&Transcript],
    pricing: Option<&PricingTable>,
    ledger: Option<&Ledger>,
    tolerance: f64,
) -> Result<BillingSection> {
    let unavailable = |r: &str| {
        Ok(BillingSection::Unavailable {
            reason: r.to_string(),
        })
    };
    if transcripts.is_empty() {
        return unavailable("no conversation transcripts");
    }
    let Some(pricing) = pricing else {
        return unavailable("no pricing table");
    };
    let Some(price) = pricing.lookup(spec.name(), model) else {
        return unavailable("no price entry");
    };
    let reported: UsageAggregate = transcripts.iter().map(|t| t.usage()).sum();
    let c_expected = expected_cost(&reported, price)?;
    let c_actual = ledger.and_then(|l| l.total(spec.name(), model, CONVERSATION_WORKLOAD));
    let tok = ApproxTokenizer;
    let answered = transcripts
        .iter()
        .flat_map(|t| t.turns.iter())
        .filter(|t| t.error.is_none());
    let (mut n_in, mut n_out) = (0i64, 0i64);
    for t in answered {
        n_in += t.local_prompt_tokens as i64;
        n_out += tok.count(&t.reply_text) as i64;
    }
    let local = UsageAggregate::new(n_in, 0, n_out);
    Ok(BillingSection::Available {
        report: gwaudit_core::billing::BillingReport::new(reported, c_expected, c_actual),
        tokens: token_conformance(local, reported, tolerance),
    })
}

fn pricing(cfg: &RunConfig) -> Result<Option<PricingTable>> {
    cfg.pricing
        .as_ref()
        .map(PricingTable::load)
        .transpose()
        .map_err(Into::into)
}

/// Recomputes billing from persisted transcripts and ledgers and writes
/// `billing.csv`.
pub fn cmd_bill(cfg: &RunConfig) -> Result<Vec<(String, String, BillingSection)>> {
    let layout = Layout::new(&cfg.output_dir);
    let transcripts = load_transcripts(layout.transcripts())
        .with_context(|| format!("reading {}", layout.transcripts().display()))?;
    let pricing = pricing(cfg)?;
    let mut out = Vec::new();
    for spec in &cfg.gateways {
        let ledger = load_ledger(spec, &layout)?;
        for model in &spec.profile.models {
            let runs: Vec<&Transcript> = transcripts
                .iter()
                .filter(|t| t.gateway == spec.name() && &t.model == model)
                .collect();
            let b = billing_section(
                spec,
                model,
                &runs,
                pricing.as_ref(),
                ledger.as_ref(),
                cfg.thresholds.token_tolerance,
            )?;
            out.push((spec.name().to_string(), model.clone(), b));
        }
    }
    crate::report::write_billing_csv(
        &layout.file("billing.csv"),
        out.iter().map(|(g, m, b)| (g.as_str(), m.as_str(), b)),
    )?;
    Ok(out)
}

fn latency_rows(
    records: &[CallRecord],
    suite: &ProbeSuite,
) -> Result<BTreeMap<(String, String), Vec<LatencyRow>>> {
    let mut out: BTreeMap<(String, String), Vec<LatencyRow>> = BTreeMap::new();
    for g in group_records(records, suite) {
        let stats = compute_stats(&g.durations)?;
        out.entry((g.key.gateway.clone(), g.key.model.clone()))
            .or_default()
            .push(LatencyRow {
                category: g.key.category,
                stats,
            });
    }
    Ok(out)
}

/// Latency statistics per (gateway, model, category) of a record log,
/// written to `latency.csv`. Defaults to the audit records.
pub fn cmd_latency(
    cfg: &RunConfig,
    records: Option<&Path>,
) -> Result<BTreeMap<(String, String), Vec<LatencyRow>>> {
    let layout = Layout::new(&cfg.output_dir);
    let path: PathBuf = records
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.audit_records());
    let suite = load_suite(&cfg.suite)?;
    let recs = load_records(&path)?;
    if recs.is_empty() {
        bail!("no records in {}", path.display());
    }
    let rows = latency_rows(&recs, &suite)?;
    crate::report::write_latency_csv(
        &layout.file("latency.csv"),
        rows.iter()
            .map(|((g, m), r)| (g.as_str(), m.as_str(), r.as_slice())),
    )?;
    Ok(rows)
}

fn input_digests(cfg: &RunConfig, layout: &Layout) -> Result<Vec<InputDigest>> {
    let mut inputs = vec![InputDigest {
        label: "config".into(),
        path: "(resolved)".into(),
        sha256: hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)),
    }];
    let mut files: Vec<(String, PathBuf)> = vec![
        ("suite".into(), cfg.suite.clone()),
        ("baseline".into(), layout.records()),
        ("audit".into(), layout.audit_records()),
        ("transcripts".into(), layout.transcripts()),
        (
            "classifiers".into(),
            layout.classifiers().join("manifest.json"),
        ),
        ("elite".into(), layout.classifiers().join("elite.json")),
    ];
    if let Some(p) = &cfg.pricing {
        files.push(("pricing".into(), p.clone()));
    }
    for spec in &cfg.gateways {
        let p = spec
            .ledger
            .clone()
            .unwrap_or_else(|| layout.sim_ledger(spec.name()));
        files.push((format!("ledger:{}", spec.name()), p));
    }
    for (label, path) in files {
        if path.is_file() {
            inputs.push(InputDigest {
                label,
                sha256: sha256_file(&path)?,
                path: path.display().to_string(),
            });
        }
    }
    Ok(inputs)
}

/// Recomputes the audit report from the persisted records, transcripts,
/// classifiers and ledgers, and writes every report file.
pub fn cmd_report(cfg: &RunConfig) -> Result<AuditReport> {
    let layout = Layout::new(&cfg.output_dir);
    let suite = load_suite(&cfg.suite)?;
    let (classifiers, elite) = load_store(&layout)?;
    let reference: ReferenceSet<f64> =
        ReferenceSet::from_records(&baseline_records(cfg, &layout)?, &suite);
    let audit = load_records(&layout.audit_records())?;
    let transcripts = if layout.transcripts().is_file() {
        load_transcripts(layout.transcripts())?
    } else {
        Vec::new()
    };
    let conversations = conversation_metrics(&transcripts)?;
    let pricing = pricing(cfg)?;
    let latency = latency_rows(&audit, &suite)?;

    let mut by_pair: HashMap<(&str, &str), Vec<CallRecord>> = HashMap::new();
    for r in &audit {
        by_pair
            .entry((&r.gateway, &r.model))
            .or_default()
            .push(r.clone());
    }

    let mut entries = Vec::new();
    for spec in &cfg.gateways {
        let ledger = load_ledger(spec, &layout)?;
        for model in &spec.profile.models {
            let key = (spec.name().to_string(), model.clone());
            let recs = by_pair
                .get(&(spec.name(), model.as_str()))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let claim = match elite.get(model) {
                Some(ids) if !recs.is_empty() => {
                    let (matrix, _) = build_matrix(recs, &suite, &reference);
                    let subset = EliteSubset {
                        model_name: model.clone(),
                        probe_ids: ids.clone(),
                        q: cfg.elite.q,
                        delta: cfg.elite.delta,
                    };
                    match verify_claim(&matrix.rows, &classifiers, &subset) {
                        Ok(r) => Some((&r).into()),
                        Err(e) => {
                            log::warn!(
                                "{}/{model}: claim verification unavailable: {e}",
                                spec.name()
                            );
                            None
                        }
                    }
                }
                _ => None,
            };
            let runs: Vec<&Transcript> = transcripts
                .iter()
                .filter(|t| t.gateway == spec.name() && &t.model == model)
                .collect();
            let billing = billing_section(
                spec,
                model,
                &runs,
                pricing.as_ref(),
                ledger.as_ref(),
                cfg.thresholds.token_tolerance,
            )?;
            let mut entry = Entry {
                gateway: key.0.clone(),
                model: model.clone(),
                claim,
                conversation: conversations.get(&key).cloned(),
                billing,
                latency: latency.get(&key).cloned().unwrap_or_default(),
                flags: Vec::new(),
            };
            let baseline_cr = match &cfg.baseline {
                Some(b) if b != spec.name() => conversations
                    .get(&(b.clone(), model.clone()))
                    .and_then(|m| m.cr),
                _ => None,
            };
            entry.flags = evaluate_flags(&entry, baseline_cr, &cfg.thresholds);
            entries.push(entry);
        }
    }
    let report = AuditReport {
        inputs: input_digests(cfg, &layout)?,
        entries,
    };
    report.write(&cfg.output_dir)?;
    Ok(report)
}
