//! Response signatures: structured-output parsing, the eleven base features
//! of one response and contrastive statistics of a (model, probe) group
//! against every other model on the same probe.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::client::CallRecord;
use crate::error::{Error, Result};
use crate::probe::{answer_appears_in, validate_answer, Probe, ProbeSuite};
use crate::scalar::{mean, variance, Scalar};

/// Guards divisions by a zero spread or mean.
pub const EPSILON: f64 = 1e-9;
/// Cap on |Cohen's d| for zero-variance groups.
pub const COHENS_D_CAP: f64 = 1e6;
const OVERLAP_BINS: usize = 10;

pub const BASE_FEATURES: [&str; 11] = [
    "answer_match",
    "answer_position",
    "depth",
    "mean_step_length",
    "step_length_var",
    "response_length",
    "density",
    "has_numeric",
    "has_latex",
    "parse_success",
    "parse_degree",
];
pub const N_BASE: usize = BASE_FEATURES.len();

pub const CONTRASTIVE_STATS: [&str; 5] = [
    "mean_diff",
    "relative_diff",
    "cohens_d",
    "std_ratio",
    "overlap",
];

const LATEX_MARKERS: [&str; 6] = ["\\(", "\\[", "$", "\\frac", "\\sqrt", "\\text"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub knowledge_path: Vec<String>,
    pub final_answer: String,
    pub parse_success: bool,
    pub parse_degree: f64,
}

impl ParsedResponse {
    fn unparsed() -> Self {
        ParsedResponse {
            knowledge_path: Vec::new(),
            final_answer: String::new(),
            parse_success: false,
            parse_degree: 0.0,
        }
    }
}

fn strip_fences(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte range of the first balanced `{...}` in `text`, honoring JSON strings.
fn first_object_span(text: &str) -> Option<(usize, usize)> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, start + i + 1));
                }
            }
            _ => {}
        }
    }
    None
}

/// Extracts `knowledge_path` and `final_answer` from a model reply.
///
/// Code fences are dropped and the first balanced top-level object is
/// parsed. Conformance grading: both fields correctly typed → 1.0, exactly
/// one → 0.5, an object with neither → 0.25, no object → 0.
pub fn parse_structured(raw_text: &str) -> ParsedResponse {
    let text = strip_fences(raw_text);
    let Some((a, b)) = first_object_span(&text) else {
        return ParsedResponse::unparsed();
    };
    let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&text[a..b]) else {
        return ParsedResponse::unparsed();
    };

    let path = match obj.get("knowledge_path") {
        Some(Value::Array(items)) if items.iter().all(Value::is_string) => Some(
            items
                .iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    let answer = match obj.get("final_answer") {
        Some(Value::String(s)) => Some(s.clone()),
        _ => None,
    };
    let conformant = path.is_some() as u8 + answer.is_some() as u8;
    let final_answer = answer.unwrap_or_else(|| match obj.get("final_answer") {
        Some(Value::Number(n)) => n.to_string(),
        _ => String::new(),
    });
    ParsedResponse {
        knowledge_path: path.unwrap_or_default(),
        final_answer,
        parse_success: conformant == 2,
        parse_degree: match conformant {
            2 => 1.0,
            1 => 0.5,
            _ => 0.25,
        },
    }
}

/// The eleven per-response features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseFeatures<F> {
    pub answer_match: F,
    pub answer_position: F,
    pub depth: F,
    pub mean_step_length: F,
    pub step_length_var: F,
    pub response_length: F,
    pub density: F,
    pub has_numeric: F,
    pub has_latex: F,
    pub parse_success: F,
    pub parse_degree: F,
}

impl<F: Scalar> BaseFeatures<F> {
    pub fn to_array(&self) -> [F; N_BASE] {
        [
            self.answer_match,
            self.answer_position,
            self.depth,
            self.mean_step_length,
            self.step_length_var,
            self.response_length,
            self.density,
            self.has_numeric,
            self.has_latex,
            self.parse_success,
            self.parse_degree,
        ]
    }

    pub fn from_slice(v: &[F]) -> Self {
        BaseFeatures {
            answer_match: v[0],
            answer_position: v[1],
            depth: v[2],
            mean_step_length: v[3],
            step_length_var: v[4],
            response_length: v[5],
            density: v[6],
            has_numeric: v[7],
            has_latex: v[8],
            parse_success: v[9],
            parse_degree: v[10],
        }
    }
}

fn indicator<F: Scalar>(b: bool) -> F {
    if b {
        F::one()
    } else {
        F::zero()
    }
}

/// Computes the base features of one response. Lengths are in characters and
/// the step-length variance is the population variance.
pub fn extract_base<F: Scalar>(
    parsed: &ParsedResponse,
    raw_text: &str,
    probe: &Probe,
) -> BaseFeatures<F> {
    let in_field = validate_answer(probe, &parsed.final_answer);
    let matched = in_field || answer_appears_in(probe, raw_text);
    let steps: Vec<F> = parsed
        .knowledge_path
        .iter()
        .map(|s| F::of_usize(s.chars().count()))
        .collect();
    let depth = steps.len();
    let response_length = F::of_usize(raw_text.chars().count());
    BaseFeatures {
        answer_match: indicator(matched),
        answer_position: indicator(in_field),
        depth: F::of_usize(depth),
        mean_step_length: mean(&steps),
        step_length_var: variance(&steps, 0),
        response_length,
        density: response_length / F::of_usize(depth.max(1)),
        has_numeric: indicator(raw_text.chars().any(|c| c.is_ascii_digit())),
        has_latex: indicator(LATEX_MARKERS.iter().any(|m| raw_text.contains(m))),
        parse_success: indicator(parsed.parse_success),
        parse_degree: F::of(parsed.parse_degree),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveStats<F> {
    pub mean_diff: F,
    pub relative_diff: F,
    pub cohens_d: F,
    pub std_ratio: F,
    pub overlap: F,
}

impl<F: Scalar> ContrastiveStats<F> {
    pub fn to_array(&self) -> [F; 5] {
        [
            self.mean_diff,
            self.relative_diff,
            self.cohens_d,
            self.std_ratio,
            self.overlap,
        ]
    }
}

/// Contrastive statistics and rank of a target group, per base feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContrast<F> {
    pub stats: Vec<ContrastiveStats<F>>,
    /// 1-based position of the target's mean among all per-model means,
    /// descending, ties by model name.
    pub rank: Vec<usize>,
}

/// Overlapping coefficient of two samples over 10 shared equal-width bins.
pub fn overlap_coefficient<F: Scalar>(a: &[F], b: &[F]) -> F {
    if a.is_empty() || b.is_empty() {
        return F::zero();
    }
    let all = a.iter().chain(b.iter()).copied();
    let lo = all.clone().fold(F::infinity(), F::min);
    let hi = all.fold(F::neg_infinity(), F::max);
    let width = hi - lo;
    if !(width > F::zero()) {
        return F::one();
    }
    let hist = |xs: &[F]| {
        let mut h = [0usize; OVERLAP_BINS];
        for &x in xs {
            let pos = ((x - lo) / width * F::of_usize(OVERLAP_BINS)).floor();
            let bin = pos.to_usize().unwrap_or(0).min(OVERLAP_BINS - 1);
            h[bin] += 1;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let (na, nb) = (F::of_usize(a.len()), F::of_usize(b.len()));
    (0..OVERLAP_BINS)
        .map(|i| (F::of_usize(ha[i]) / na).min(F::of_usize(hb[i]) / nb))
        .sum::<F>()
        .min(F::one())
}

/// Statistics of one feature: target sample against the pooled others.
pub fn contrast_one<F: Scalar>(target: &[F], others: &[F]) -> ContrastiveStats<F> {
    let eps = F::of(EPSILON);
    let cap = F::of(COHENS_D_CAP);
    let (mt, mo) = (mean(target), mean(others));
    let (vt, vo) = (variance(target, 1), variance(others, 1));
    let (st, so) = (vt.sqrt(), vo.sqrt());
    let mean_diff = mt - mo;
    let (nt, no) = (target.len(), others.len());
    let pooled = if nt + no > 2 {
        ((F::of_usize(nt.saturating_sub(1)) * vt + F::of_usize(no.saturating_sub(1)) * vo)
            / F::of_usize(nt + no - 2))
        .sqrt()
    } else {
        F::zero()
    };
    let cohens_d = if mean_diff == F::zero() {
        F::zero()
    } else {
        (mean_diff / (pooled + eps)).max(-cap).min(cap)
    };
    let std_ratio = if st == so { F::one() } else { st / (so + eps) };
    ContrastiveStats {
        mean_diff,
        relative_diff: mean_diff / (mo.abs() + eps),
        cohens_d,
        std_ratio,
        overlap: overlap_coefficient(target, others),
    }
}

/// Ranks `target_mean` among the other models' means (descending, ties by
/// name), returning a 1-based position.
pub fn rank_of<F: Scalar>(target_name: &str, target_mean: F, others: &[(&str, F)]) -> usize {
    let mut all: Vec<(&str, F)> = Vec::with_capacity(others.len() + 1);
    all.push((target_name, target_mean));
    all.extend(others.iter().filter(|(n, _)| *n != target_name).copied());
    all.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    all.iter()
        .position(|(n, _)| *n == target_name)
        .expect("target present")
        + 1
}

/// Contrastive statistics of a target group (rows × base features) against
/// the other models' samples on the same probe.
pub fn contrastive_features<F: Scalar>(
    target_name: &str,
    target_rows: &[[F; N_BASE]],
    other_rows: &BTreeMap<String, Vec<[F; N_BASE]>>,
) -> Result<GroupContrast<F>> {
    if target_rows.is_empty() {
        return Err(Error::EmptyInput("target rows"));
    }
    let others: Vec<(&str, &Vec<[F; N_BASE]>)> = other_rows
        .iter()
        .filter(|(name, rows)| name.as_str() != target_name && !rows.is_empty())
        .map(|(n, r)| (n.as_str(), r))
        .collect();
    if others.is_empty() {
        return Err(Error::EmptyInput("other-model rows"));
    }
    let column = |rows: &[[F; N_BASE]], f: usize| rows.iter().map(|r| r[f]).collect::<Vec<F>>();
    let mut stats = Vec::with_capacity(N_BASE);
    let mut rank = Vec::with_capacity(N_BASE);
    for f in 0..N_BASE {
        let t = column(target_rows, f);
        let pooled: Vec<F> = others
            .iter()
            .flat_map(|(_, rows)| column(rows, f))
            .collect();
        stats.push(contrast_one(&t, &pooled));
        let means: Vec<(&str, F)> = others
            .iter()
            .map(|(n, rows)| (*n, mean(&column(rows, f))))
            .collect();
        rank.push(rank_of(target_name, mean(&t), &means));
    }
    Ok(GroupContrast { stats, rank })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureVector<F> {
    pub base: BaseFeatures<F>,
    pub contrast: GroupContrast<F>,
}

/// Column names in row order: base features, then five statistics per base
/// feature, then one rank per base feature.
pub fn feature_schema() -> Vec<String> {
    let mut cols: Vec<String> = BASE_FEATURES.iter().map(|s| s.to_string()).collect();
    for f in BASE_FEATURES {
        for s in CONTRASTIVE_STATS {
            cols.push(format!("{f}_{s}"));
        }
    }
    cols.extend(BASE_FEATURES.iter().map(|f| format!("{f}_rank")));
    cols
}

pub const N_FEATURES: usize = N_BASE * (1 + CONTRASTIVE_STATS.len() + 1);

impl<F: Scalar> SignatureVector<F> {
    pub fn values(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(N_FEATURES);
        v.extend(self.base.to_array());
        for s in &self.contrast.stats {
            v.extend(s.to_array());
        }
        v.extend(self.contrast.rank.iter().map(|&r| F::of_usize(r)));
        v
    }

    pub fn from_values(v: &[F]) -> Result<Self> {
        if v.len() != N_FEATURES {
            return Err(Error::SchemaMismatch {
                expected: N_FEATURES,
                got: v.len(),
            });
        }
        let stats = (0..N_BASE)
            .map(|f| {
                let s = &v[N_BASE + 5 * f..N_BASE + 5 * f + 5];
                ContrastiveStats {
                    mean_diff: s[0],
                    relative_diff: s[1],
                    cohens_d: s[2],
                    std_ratio: s[3],
                    overlap: s[4],
                }
            })
            .collect();
        let rank = v[N_BASE * 6..]
            .iter()
            .map(|r| r.to_usize().unwrap_or(0))
            .collect();
        Ok(SignatureVector {
            base: BaseFeatures::from_slice(&v[..N_BASE]),
            contrast: GroupContrast { stats, rank },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureRow<F> {
    pub model_name: String,
    pub probe_id: String,
    pub repetition: u32,
    pub vector: SignatureVector<F>,
}

/// Rows are probe repetitions, columns the features of [`feature_schema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureMatrix<F> {
    pub schema: Vec<String>,
    pub rows: Vec<SignatureRow<F>>,
}

/// Baseline base-feature samples per probe and model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceSet<F> {
    pub by_probe: BTreeMap<String, BTreeMap<String, Vec<[F; N_BASE]>>>,
}

impl<F: Scalar> ReferenceSet<F> {
    pub fn from_records(records: &[CallRecord], suite: &ProbeSuite) -> Self {
        let mut set = ReferenceSet {
            by_probe: BTreeMap::new(),
        };
        for r in records.iter().filter(|r| r.succeeded()) {
            if let Some(probe) = suite.get(&r.probe_id) {
                let base = extract_base::<F>(&parse_structured(&r.raw_text), &r.raw_text, probe);
                set.by_probe
                    .entry(r.probe_id.clone())
                    .or_default()
                    .entry(r.model.clone())
                    .or_default()
                    .push(base.to_array());
            }
        }
        set
    }

    pub fn models(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .by_probe
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub model: String,
    pub probe_id: String,
    pub repetition: u32,
    pub reason: String,
}

/// Builds one signature row per usable record. Contrast for a record's
/// (model, probe) group is taken against every other reference model on that
/// probe. Failed calls, unknown probes and probes without any other
/// reference model are skipped with a warning.
pub fn build_matrix<F: Scalar>(
    records: &[CallRecord],
    suite: &ProbeSuite,
    reference: &ReferenceSet<F>,
) -> (SignatureMatrix<F>, Vec<SkippedRecord>) {
    let mut skipped = Vec::new();
    let skip = |r: &CallRecord, reason: String, skipped: &mut Vec<SkippedRecord>| {
        log::warn!(
            "skipping record {}/{}#{}: {reason}",
            r.model,
            r.probe_id,
            r.repetition
        );
        skipped.push(SkippedRecord {
            model: r.model.clone(),
            probe_id: r.probe_id.clone(),
            repetition: r.repetition,
            reason,
        });
    };

    type Group<F> = Vec<(u32, BaseFeatures<F>)>;
    let mut groups: BTreeMap<(String, String), Group<F>> = BTreeMap::new();
    let mut members: BTreeMap<(String, String), Vec<&CallRecord>> = BTreeMap::new();
    for r in records {
        if let Some(e) = &r.error {
            skip(r, format!("call failed: {}", e.class), &mut skipped);
            continue;
        }
        let Some(probe) = suite.get(&r.probe_id) else {
            skip(r, "probe not in suite".into(), &mut skipped);
            continue;
        };
        let base = extract_base::<F>(&parse_structured(&r.raw_text), &r.raw_text, probe);
        let key = (r.model.clone(), r.probe_id.clone());
        groups
            .entry(key.clone())
            .or_default()
            .push((r.repetition, base));
        members.entry(key).or_default().push(r);
    }

    let empty = BTreeMap::new();
    let mut rows = Vec::new();
    for ((model, probe_id), group) in groups {
        let target: Vec<[F; N_BASE]> = group.iter().map(|(_, b)| b.to_array()).collect();
        let others = reference.by_probe.get(&probe_id).unwrap_or(&empty);
        match contrastive_features(&model, &target, others) {
            Ok(contrast) => {
                for (repetition, base) in group {
                    rows.push(SignatureRow {
                        model_name: model.clone(),
                        probe_id: probe_id.clone(),
                        repetition,
                        vector: SignatureVector {
                            base,
                            contrast: contrast.clone(),
                        },
                    });
                }
            }
            Err(_) => {
                for r in &members[&(model.clone(), probe_id.clone())] {
                    skip(
                        r,
                        "no other reference model on this probe".into(),
                        &mut skipped,
                    );
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.model_name, &a.probe_id, a.repetition).cmp(&(&b.model_name, &b.probe_id, b.repetition))
    });
    (
        SignatureMatrix {
            schema: feature_schema(),
            rows,
        },
        skipped,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    key_columns: Vec<String>,
    feature_columns: Vec<String>,
}

const KEY_COLUMNS: [&str; 3] = ["model_name", "probe_id", "repetition"];

pub fn schema_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("schema.json")
}

impl<F: Scalar> SignatureMatrix<F> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes the matrix as CSV plus a sidecar schema file.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<&str> = KEY_COLUMNS
            .iter()
            .copied()
            .chain(self.schema.iter().map(String::as_str))
            .collect();
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.model_name.clone(),
                row.probe_id.clone(),
                row.repetition.to_string(),
            ];
            rec.extend(row.vector.values().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let schema = SchemaFile {
            key_columns: KEY_COLUMNS.iter().map(|s| s.to_string()).collect(),
            feature_columns: self.schema.clone(),
        };
        std::fs::write(schema_path(path), serde_json::to_string_pretty(&schema)?)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let schema: SchemaFile =
            serde_json::from_str(&std::fs::read_to_string(schema_path(path))?)?;
        if schema.feature_columns != feature_schema() {
            return Err(Error::SchemaMismatch {
                expected: N_FEATURES,
                got: schema.feature_columns.len(),
            });
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad = |m: String| Error::Parse {
                path: path.to_path_buf(),
                message: m,
            };
            let repetition = rec[2]
                .parse()
                .map_err(|e| bad(format!("repetition: {e}")))?;
            let values = rec
                .iter()
                .skip(3)
                .map(|s| {
                    s.parse::<f64>()
                        .map(F::of)
                        .map_err(|e| bad(format!("value {s:?}: {e}")))
                })
                .collect::<Result<Vec<F>>>()?;
            rows.push(SignatureRow {
                model_name: rec[0].to_string(),
                probe_id: rec[1].to_string(),
                repetition,
                vector: SignatureVector::from_values(&values)?,
            });
        }
        Ok(SignatureMatrix {
            schema: schema.feature_columns,
            rows,
        })
    }
}
