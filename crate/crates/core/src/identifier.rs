//! One-vs-rest model identification: dataset split, training, threshold
//! selection, elite probe distillation and claim verification.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gbdt::{self, Ensemble, TrainSet, TreeParams};
use crate::scalar::Scalar;
use crate::signature::{feature_schema, SignatureRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    /// Tier from a cross-validated F1: >= 0.95 easy, >= 0.85 medium.
    pub fn from_f1(f1: f64) -> Self {
        if f1 >= 0.95 {
            Difficulty::Easy
        } else if f1 >= 0.85 {
            Difficulty::Medium
        } else {
            Difficulty::Hard
        }
    }

    fn weight_exponent(self) -> f64 {
        match self {
            Difficulty::Easy => 0.5,
            Difficulty::Medium => 0.7,
            Difficulty::Hard => 0.9,
        }
    }
}

/// Positive-class weight for a post-oversampling negative/positive ratio.
pub fn pos_weight(difficulty: Difficulty, rho: f64) -> f64 {
    rho.powf(difficulty.weight_exponent())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    pub oversample_factor: usize,
    /// Fixed tier; `None` derives it from cross-validation.
    pub difficulty: Option<Difficulty>,
    pub tree: TreeParams,
    pub seed: u64,
    /// Share of shuffled training rows held out for early stopping and
    /// threshold selection.
    pub validation_fraction: f64,
    pub cv_folds: usize,
    pub cv_rounds: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            train_per_cell: 10,
            test_per_cell: 2,
            oversample_factor: 20,
            difficulty: None,
            tree: TreeParams::default(),
            seed: 0,
            validation_fraction: 0.1,
            cv_folds: 3,
            cv_rounds: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.oversample_factor < 1 {
            return Err(Error::InvalidArgument(
                "oversample_factor must be >= 1".into(),
            ));
        }
        if self.train_per_cell == 0 {
            return Err(Error::InvalidArgument("train_per_cell must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument(
                "validation_fraction must be in (0, 1)".into(),
            ));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidArgument("cv_folds must be >= 2".into()));
        }
        self.tree.validate()
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    F1,
    Recall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub grid: Vec<f64>,
    pub objective: Objective,
    pub min_precision: f64,
}

/// 0.10, 0.15, ..., 0.95.
pub fn default_grid() -> Vec<f64> {
    (0..18).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

impl ThresholdPolicy {
    pub fn for_difficulty(d: Difficulty) -> Self {
        let (objective, min_precision) = match d {
            Difficulty::Easy | Difficulty::Medium => (Objective::F1, 0.5),
            Difficulty::Hard => (Objective::Recall, 0.35),
        };
        ThresholdPolicy {
            grid: default_grid(),
            objective,
            min_precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.grid.is_empty()
            && self.grid.iter().all(|t| (0.0..=1.0).contains(t))
            && self.grid.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "threshold grid must be strictly increasing within [0, 1]".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Metrics {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

/// Confusion counts when predicting positive iff `score >= threshold`.
pub fn metrics_at<F: Scalar>(scores: &[F], labels: &[bool], threshold: f64) -> Metrics {
    let t = F::of(threshold);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= t, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Metrics::from_counts(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub threshold: f64,
    pub metrics: Metrics,
    /// No grid point met the minimum precision.
    pub unconstrained: bool,
}

/// Picks the grid threshold maximizing the policy objective among those
/// meeting the minimum precision, lowest threshold on ties. Without any
/// admissible threshold the highest-precision one is returned, flagged.
pub fn sweep_threshold<F: Scalar>(
    scores: &[F],
    labels: &[bool],
    policy: &ThresholdPolicy,
) -> Result<SweepResult> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "scores and labels differ in length".into(),
        ));
    }
    policy.validate()?;
    let evaluated: Vec<(f64, Metrics)> = policy
        .grid
        .iter()
        .map(|&t| (t, metrics_at(scores, labels, t)))
        .collect();
    let objective = |m: &Metrics| match policy.objective {
        Objective::F1 => m.f1,
        Objective::Recall => m.recall,
    };
    let pick = |key: &dyn Fn(&Metrics) -> f64, admissible: &dyn Fn(&Metrics) -> bool| {
        let mut best: Option<(f64, Metrics)> = None;
        for &(t, m) in &evaluated {
            if admissible(&m) && best.is_none_or(|(_, b)| key(&m) > key(&b)) {
                best = Some((t, m));
            }
        }
        best
    };
    if let Some((threshold, metrics)) = pick(&objective, &|m| m.precision >= policy.min_precision) {
        return Ok(SweepResult {
            threshold,
            metrics,
            unconstrained: false,
        });
    }
    let (threshold, metrics) = pick(&|m| m.precision, &|_| true).expect("grid is non-empty");
    Ok(SweepResult {
        threshold,
        metrics,
        unconstrained: true,
    })
}

/// Rows partitioned per (model, probe) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<F> {
    pub train: Vec<SignatureRow<F>>,
    pub test: Vec<SignatureRow<F>>,
}

/// Seeded per-cell split into `train_per_cell` training and `test_per_cell`
/// test rows. Rows beyond that count are left out.
pub fn split_dataset<F: Scalar>(
    rows: &[SignatureRow<F>],
    config: &TrainingConfig,
) -> Result<DatasetSplit<F>> {
    let need = config.train_per_cell + config.test_per_cell;
    let mut cells: BTreeMap<(&str, &str), Vec<&SignatureRow<F>>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.model_name.as_str(), r.probe_id.as_str()))
            .or_default()
            .push(r);
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for ((model, probe), mut cell) in cells {
        if cell.len() < need {
            return Err(Error::UndersizedCell {
                model: model.to_string(),
                probe: probe.to_string(),
                have: cell.len(),
                need,
            });
        }
        cell.sort_by_key(|r| r.repetition);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["split", model, probe]));
        cell.shuffle(&mut rng);
        split
            .train
            .extend(cell[..config.train_per_cell].iter().map(|r| (*r).clone()));
        split.test.extend(
            cell[config.train_per_cell..need]
                .iter()
                .map(|r| (*r).clone()),
        );
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelClassifier<F> {
    pub model_name: String,
    pub ensemble: Ensemble<F>,
    pub threshold: f64,
    pub feature_schema: Vec<String>,
    pub difficulty: Difficulty,
    /// Post-oversampling negative/positive ratio.
    pub rho: f64,
    pub pos_weight: f64,
    pub validation: SweepResult,
    pub config_digest: String,
}

impl<F: Scalar> ModelClassifier<F> {
    pub fn predict_proba(&self, values: &[F]) -> F {
        self.ensemble.predict_proba(values)
    }

    pub fn score_row(&self, row: &SignatureRow<F>) -> F {
        self.predict_proba(&row.vector.values())
    }

    pub fn fires(&self, values: &[F]) -> bool {
        self.predict_proba(values) >= F::of(self.threshold)
    }

    /// Confusion metrics of this classifier on labeled rows.
    pub fn evaluate(&self, rows: &[SignatureRow<F>]) -> Metrics {
        let scores: Vec<F> = rows.iter().map(|r| self.score_row(r)).collect();
        let labels: Vec<bool> = rows
            .iter()
            .map(|r| r.model_name == self.model_name)
            .collect();
        metrics_at(&scores, &labels, self.threshold)
    }
}

struct Prepared<F> {
    x: Vec<Vec<F>>,
    y: Vec<bool>,
}

fn oversample<F: Scalar>(
    x: &[Vec<F>],
    y: &[bool],
    factor: usize,
    rng: &mut ChaCha8Rng,
) -> (Prepared<F>, f64) {
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg = y.len() - pos.len();
    let mut out = Prepared {
        x: x.to_vec(),
        y: y.to_vec(),
    };
    let extra = pos.len() * (factor - 1);
    for _ in 0..extra {
        let &i = pos.choose(rng).expect("positives present");
        out.x.push(x[i].clone());
        out.y.push(true);
    }
    let rho = neg as f64 / (pos.len() * factor) as f64;
    (out, rho)
}

fn weights<F: Scalar>(y: &[bool], pos_weight: f64) -> Vec<F> {
    y.iter()
        .map(|&t| if t { F::of(pos_weight) } else { F::one() })
        .collect()
}

/// Pooled out-of-fold F1 at threshold 0.5 with medium weighting.
fn cross_validated_f1<F: Scalar>(
    x: &[Vec<F>],
    y: &[bool],
    config: &TrainingConfig,
    model: &str,
) -> Result<f64> {
    let k = config.cv_folds;
    let params = TreeParams {
        rounds: config.tree.rounds.min(config.cv_rounds),
        ..config.tree.clone()
    };
    let mut scores = vec![F::zero(); x.len()];
    for fold in 0..k {
        let (mut tx, mut ty) = (Vec::new(), Vec::new());
        for i in (0..x.len()).filter(|i| i % k != fold) {
            tx.push(x[i].clone());
            ty.push(y[i]);
        }
        if !ty.iter().any(|&t| t) || ty.iter().all(|&t| t) {
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["cv", model, &fold.to_string()]));
        let (data, rho) = oversample(&tx, &ty, config.oversample_factor, &mut rng);
        let w = weights::<F>(&data.y, pos_weight(Difficulty::Medium, rho));
        let e = gbdt::fit(
            &TrainSet {
                x: &data.x,
                y: &data.y,
                weight: &w,
            },
            None,
            &params,
            derive_seed(config.seed, &["cv-fit", model, &fold.to_string()]),
        )?;
        for i in (0..x.len()).filter(|i| i % k == fold) {
            scores[i] = e.predict_proba(&x[i]);
        }
    }
    Ok(metrics_at(&scores, y, 0.5).f1)
}

/// Trains the detector for `model_name` against every other model in
/// `train`. Positives are oversampled with replacement by
/// `oversample_factor`; a seeded 10% slice of the original rows is held out
/// for early stopping and threshold selection.
pub fn train_one_vs_rest<F: Scalar>(
    train: &[SignatureRow<F>],
    model_name: &str,
    config: &TrainingConfig,
) -> Result<ModelClassifier<F>> {
    config.validate()?;
    let n_pos = train.iter().filter(|r| r.model_name == model_name).count();
    if n_pos == 0 {
        return Err(Error::NoPositives(model_name.to_string()));
    }
    if n_pos == train.len() {
        return Err(Error::NoNegatives(model_name.to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["train", model_name]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let n_valid = ((train.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, train.len() - 1);
    let (fit_idx, valid_idx) = order.split_at(train.len() - n_valid);

    let rows = |idx: &[usize]| -> (Vec<Vec<F>>, Vec<bool>) {
        idx.iter()
            .map(|&i| (train[i].vector.values(), train[i].model_name == model_name))
            .unzip()
    };
    let (fx, fy) = rows(fit_idx);
    let (vx, vy) = rows(valid_idx);
    if !fy.iter().any(|&t| t) {
        return Err(Error::NoPositives(model_name.to_string()));
    }

    let difficulty = match config.difficulty {
        Some(d) => d,
        None => Difficulty::from_f1(cross_validated_f1(&fx, &fy, config, model_name)?),
    };
    let (data, rho) = oversample(&fx, &fy, config.oversample_factor, &mut rng);
    let pw = pos_weight(difficulty, rho);
    let w = weights::<F>(&data.y, pw);
    let ensemble = gbdt::fit(
        &TrainSet {
            x: &data.x,
            y: &data.y,
            weight: &w,
        },
        Some((&vx, &vy)),
        &config.tree,
        derive_seed(config.seed, &["fit", model_name]),
    )?;

    let policy = ThresholdPolicy::for_difficulty(difficulty);
    // fall back to the fitting rows when the slice holds no positive
    let (sx, sy) = if vy.iter().any(|&t| t) {
        (&vx, &vy)
    } else {
        (&fx, &fy)
    };
    let scores: Vec<F> = sx.iter().map(|r| ensemble.predict_proba(r)).collect();
    let validation = sweep_threshold(&scores, sy, &policy)?;
    if validation.unconstrained {
        log::warn!(
            "classifier {model_name}: no threshold reaches precision {}",
            policy.min_precision
        );
    }
    Ok(ModelClassifier {
        model_name: model_name.to_string(),
        ensemble,
        threshold: validation.threshold,
        feature_schema: feature_schema(),
        difficulty,
        rho,
        pos_weight: pw,
        validation,
        config_digest: config.digest(),
    })
}

/// Trains one classifier per model, in parallel.
pub fn train_ensemble<F: Scalar>(
    train: &[SignatureRow<F>],
    models: &[String],
    config: &TrainingConfig,
) -> Result<Vec<ModelClassifier<F>>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = models
            .iter()
            .map(|m| scope.spawn(move || train_one_vs_rest(train, m, config)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Mean classifier probability per probe and per true model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScoreTable {
    pub probes: Vec<String>,
    pub models: Vec<String>,
    /// `mean[s][n]`; `None` where model n has no sample of probe s.
    pub mean: Vec<Vec<Option<f64>>>,
}

impl ProbeScoreTable {
    pub fn from_scores(scored: &[(&str, &str, f64)]) -> Self {
        let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
        let mut probes = BTreeSet::new();
        let mut models = BTreeSet::new();
        for &(probe, model, p) in scored {
            let e = sums.entry((probe, model)).or_insert((0.0, 0));
            e.0 += p;
            e.1 += 1;
            probes.insert(probe);
            models.insert(model);
        }
        let probes: Vec<String> = probes.into_iter().map(str::to_string).collect();
        let models: Vec<String> = models.into_iter().map(str::to_string).collect();
        let mean = probes
            .iter()
            .map(|s| {
                models
                    .iter()
                    .map(|n| {
                        sums.get(&(s.as_str(), n.as_str()))
                            .map(|(t, c)| t / *c as f64)
                    })
                    .collect()
            })
            .collect();
        ProbeScoreTable {
            probes,
            models,
            mean,
        }
    }

    pub fn build<F: Scalar>(classifier: &ModelClassifier<F>, rows: &[SignatureRow<F>]) -> Self {
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| classifier.score_row(r).as_f64())
            .collect();
        let scored: Vec<(&str, &str, f64)> = rows
            .iter()
            .zip(&scores)
            .map(|(r, &p)| (r.probe_id.as_str(), r.model_name.as_str(), p))
            .collect();
        Self::from_scores(&scored)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackfillMode {
    /// Remaining probes ranked by the target model's mean probability.
    #[default]
    MeanScore,
    /// Remaining probes ranked by how strongly their samples activate the
    /// classifier's highest-gain features.
    GainImportance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteSubset {
    pub model_name: String,
    pub probe_ids: Vec<String>,
    pub q: usize,
    pub delta: f64,
}

pub const DEFAULT_Q: usize = 12;
pub const DEFAULT_DELTA: f64 = 0.35;

/// Candidate probes whose margin over every other model reaches `delta`.
pub fn candidate_set(table: &ProbeScoreTable, model: &str, delta: f64) -> Vec<String> {
    let Some(m) = table.models.iter().position(|n| n == model) else {
        return Vec::new();
    };
    table
        .probes
        .iter()
        .zip(&table.mean)
        .filter_map(|(s, row)| {
            let own = row[m]?;
            let rival = row
                .iter()
                .enumerate()
                .filter(|(n, _)| *n != m)
                .filter_map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let rival = if rival.is_finite() { rival } else { 0.0 };
            (own - rival >= delta).then(|| s.clone())
        })
        .collect()
}

fn by_key_desc(a: (&String, f64), b: (&String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Selection over a precomputed table. `backfill` scores probes outside the
/// candidate set; higher is better.
pub fn select_from_table(
    table: &ProbeScoreTable,
    model: &str,
    q: usize,
    delta: f64,
    backfill: &dyn Fn(&str) -> f64,
) -> Result<Vec<String>> {
    if q == 0 {
        return Err(Error::InvalidArgument("Q must be >= 1".into()));
    }
    let m = table
        .models
        .iter()
        .position(|n| n == model)
        .ok_or_else(|| Error::NoPositives(model.to_string()))?;
    let own: BTreeMap<&String, f64> = table
        .probes
        .iter()
        .zip(&table.mean)
        .filter_map(|(s, row)| row[m].map(|v| (s, v)))
        .collect();

    let candidates = candidate_set(table, model, delta);
    let mut ranked: Vec<(&String, f64)> = candidates.iter().map(|s| (s, own[s])).collect();
    ranked.sort_by(|a, b| by_key_desc(*a, *b));
    let mut chosen: Vec<String> = ranked.iter().take(q).map(|(s, _)| (*s).clone()).collect();

    if chosen.len() < q {
        let taken: BTreeSet<&String> = candidates.iter().collect();
        let mut rest: Vec<(&String, f64)> = own
            .keys()
            .filter(|s| !taken.contains(*s))
            .map(|s| (*s, backfill(s)))
            .collect();
        rest.sort_by(|a, b| by_key_desc(*a, *b));
        chosen.extend(
            rest.iter()
                .take(q - chosen.len())
                .map(|(s, _)| (*s).clone()),
        );
    }
    Ok(chosen)
}

const TOP_GAIN_FEATURES: usize = 5;

/// Per-probe activation of the top gain features: gain-weighted absolute
/// standardized deviation of the probe's mean from the overall mean.
fn gain_scores<F: Scalar>(
    classifier: &ModelClassifier<F>,
    rows: &[SignatureRow<F>],
) -> BTreeMap<String, f64> {
    let gains: Vec<f64> = classifier
        .ensemble
        .gain_importance
        .iter()
        .map(|g| g.as_f64())
        .collect();
    let mut top: Vec<usize> = (0..gains.len()).collect();
    top.sort_by(|&a, &b| {
        gains[b]
            .partial_cmp(&gains[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    top.truncate(TOP_GAIN_FEATURES);

    let own: Vec<(&str, Vec<f64>)> = rows
        .iter()
        .filter(|r| r.model_name == classifier.model_name)
        .map(|r| {
            (
                r.probe_id.as_str(),
                r.vector.values().iter().map(|v| v.as_f64()).collect(),
            )
        })
        .collect();
    let all: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.vector.values().iter().map(|v| v.as_f64()).collect())
        .collect();
    let n = all.len().max(1) as f64;
    let stats: Vec<(f64, f64)> = top
        .iter()
        .map(|&f| {
            let mu = all.iter().map(|v| v[f]).sum::<f64>() / n;
            let var = all.iter().map(|v| (v[f] - mu).powi(2)).sum::<f64>() / n;
            (mu, var.sqrt())
        })
        .collect();

    let mut per_probe: BTreeMap<&str, Vec<&Vec<f64>>> = BTreeMap::new();
    for (p, v) in &own {
        per_probe.entry(p).or_default().push(v);
    }
    per_probe
        .into_iter()
        .map(|(p, vs)| {
            let k = vs.len() as f64;
            let score = top
                .iter()
                .zip(&stats)
                .map(|(&f, &(mu, sd))| {
                    let m = vs.iter().map(|v| v[f]).sum::<f64>() / k;
                    gains[f] * (m - mu).abs() / (sd + 1e-9)
                })
                .sum();
            (p.to_string(), score)
        })
        .collect()
}

/// Distills the `q` probes that best separate `classifier.model_name` from
/// every other model in `rows`.
pub fn select_elite<F: Scalar>(
    classifier: &ModelClassifier<F>,
    rows: &[SignatureRow<F>],
    q: usize,
    delta: f64,
    mode: BackfillMode,
) -> Result<EliteSubset> {
    // fixed summation order keeps the result independent of row order
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        (&a.model_name, &a.probe_id, a.repetition).cmp(&(&b.model_name, &b.probe_id, b.repetition))
    });
    let rows = sorted.as_slice();
    let table = ProbeScoreTable::build(classifier, rows);
    let model = classifier.model_name.as_str();
    let probe_ids = match mode {
        BackfillMode::MeanScore => {
            let m = table.models.iter().position(|n| n == model);
            let own: BTreeMap<&str, f64> = table
                .probes
                .iter()
                .zip(&table.mean)
                .filter_map(|(s, row)| Some((s.as_str(), row[m?]?)))
                .collect();
            select_from_table(&table, model, q, delta, &|s| {
                own.get(s).copied().unwrap_or(0.0)
            })?
        }
        BackfillMode::GainImportance => {
            let scores = gain_scores(classifier, rows);
            select_from_table(&table, model, q, delta, &|s| {
                scores.get(s).copied().unwrap_or(0.0)
            })?
        }
    };
    Ok(EliteSubset {
        model_name: model.to_string(),
        probe_ids,
        q,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", content = "model", rename_all = "snake_case")]
pub enum ClaimLabel {
    Claimed,
    Other(String),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub probe_id: String,
    pub repetition: u32,
    pub label: ClaimLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimReport {
    pub claimed_model: String,
    pub fraction_claimed: f64,
    pub per_record: Vec<LabeledRecord>,
}

impl ClaimReport {
    pub fn count(&self, label: &ClaimLabel) -> usize {
        self.per_record.iter().filter(|r| &r.label == label).count()
    }
}

/// Labels one signature against the ensemble.
pub fn label_row<F: Scalar>(
    values: &[F],
    claimed: &str,
    ensemble: &[ModelClassifier<F>],
) -> ClaimLabel {
    let mut best: Option<(f64, &str)> = None;
    for c in ensemble {
        let p = c.predict_proba(values).as_f64();
        if p < c.threshold {
            continue;
        }
        if c.model_name == claimed {
            return ClaimLabel::Claimed;
        }
        let margin = p - c.threshold;
        let better = match best {
            None => true,
            Some((bm, bn)) => margin > bm || (margin == bm && c.model_name.as_str() < bn),
        };
        if better {
            best = Some((margin, &c.model_name));
        }
    }
    match best {
        Some((_, name)) => ClaimLabel::Other(name.to_string()),
        None => ClaimLabel::None,
    }
}

/// Share of a gateway's responses on the claimed model's elite probes that
/// the claimed model's classifier recognizes.
pub fn verify_claim<F: Scalar>(
    rows: &[SignatureRow<F>],
    ensemble: &[ModelClassifier<F>],
    elite: &EliteSubset,
) -> Result<ClaimReport> {
    let elite_ids: BTreeSet<&str> = elite.probe_ids.iter().map(String::as_str).collect();
    let mut per_record: Vec<LabeledRecord> = rows
        .iter()
        .filter(|r| elite_ids.contains(r.probe_id.as_str()))
        .map(|r| LabeledRecord {
            probe_id: r.probe_id.clone(),
            repetition: r.repetition,
            label: label_row(&r.vector.values(), &elite.model_name, ensemble),
        })
        .collect();
    if per_record.is_empty() {
        return Err(Error::EmptyInput("records on elite probes"));
    }
    per_record.sort_by(|a, b| (&a.probe_id, a.repetition).cmp(&(&b.probe_id, b.repetition)));
    let claimed = per_record
        .iter()
        .filter(|r| r.label == ClaimLabel::Claimed)
        .count();
    Ok(ClaimReport {
        claimed_model: elite.model_name.clone(),
        fraction_claimed: claimed as f64 / per_record.len() as f64,
        per_record,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_name: String,
    pub file: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub members: Vec<ManifestEntry>,
}

/// Directory of serialized classifiers: one JSON file per model, a
/// `manifest.json` listing them and an optional `elite.json`.
#[derive(Debug, Clone)]
pub struct ClassifierStore {
    pub dir: PathBuf,
}

fn file_stem(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

impl ClassifierStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ClassifierStore { dir })
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        match std::fs::read_to_string(self.manifest_path()) {
            Ok(s) => Ok(serde_json::from_str(&s)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes one classifier and registers it; other members are untouched.
    pub fn save<F: Scalar + Serialize>(&self, classifier: &ModelClassifier<F>) -> Result<()> {
        let file = format!("{}.json", file_stem(&classifier.model_name));
        write_atomic(&self.dir.join(&file), &serde_json::to_vec(classifier)?)?;
        let mut manifest = self.manifest()?;
        manifest
            .members
            .retain(|m| m.model_name != classifier.model_name);
        manifest.members.push(ManifestEntry {
            model_name: classifier.model_name.clone(),
            file,
            config_digest: classifier.config_digest.clone(),
        });
        manifest
            .members
            .sort_by(|a, b| a.model_name.cmp(&b.model_name));
        write_atomic(
            &self.manifest_path(),
            &serde_json::to_vec_pretty(&manifest)?,
        )
    }

    pub fn load_all<F: Scalar + for<'de> Deserialize<'de>>(
        &self,
    ) -> Result<Vec<ModelClassifier<F>>> {
        self.manifest()?
            .members
            .iter()
            .map(|m| {
                let bytes = std::fs::read(self.dir.join(&m.file))?;
                Ok(serde_json::from_slice(&bytes)?)
            })
            .collect()
    }

    pub fn save_elite(&self, elite: &BTreeMap<String, Vec<String>>) -> Result<()> {
        write_atomic(
            &self.dir.join("elite.json"),
            &serde_json::to_vec_pretty(elite)?,
        )
    }

    pub fn load_elite(&self) -> Result<BTreeMap<String, Vec<String>>> {
        Ok(serde_json::from_str(&std::fs::read_to_string(
            self.dir.join("elite.json"),
        )?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        let g = default_grid();
        assert_eq!(g.len(), 18);
        assert_eq!(g[0], 0.10);
        assert_eq!(g[1], 0.15);
        assert_eq!(g[17], 0.95);
    }

    #[test]
    fn medium_weight_power() {
        assert!((pos_weight(Difficulty::Medium, 1.15) - 1.15f64.powf(0.7)).abs() < 1e-15);
        assert!((pos_weight(Difficulty::Medium, 1.15) - 1.103).abs() < 5e-4);
        assert_eq!(pos_weight(Difficulty::Easy, 4.0), 2.0);
    }

    #[test]
    fn paper_scale_rho() {
        // 1 positive model against 23 others, 550 rows per model
        let y: Vec<bool> = (0..24 * 550).map(|i| i < 550).collect();
        let x: Vec<Vec<f64>> = vec![vec![0.0]; y.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (data, rho) = oversample(&x, &y, 20, &mut rng);
        assert!((rho - 1.15).abs() < 1e-12);
        assert_eq!(data.y.iter().filter(|&&t| t).count(), 550 * 20);
    }

    #[test]
    fn separated_scores_pick_lowest_tie() {
        let scores = [0.9f64, 0.9, 0.1, 0.1, 0.1];
        let labels = [true, true, false, false, false];
        let r = sweep_threshold(
            &scores,
            &labels,
            &ThresholdPolicy::for_difficulty(Difficulty::Easy),
        )
        .unwrap();
        assert_eq!(r.threshold, 0.15);
        assert_eq!(r.metrics.f1, 1.0);
        assert!(!r.unconstrained);
    }

    #[test]
    fn single_class_recall() {
        let scores = [0.5f64; 4];
        let labels = [true; 4];
        for t in default_grid() {
            let m = metrics_at(&scores, &labels, t);
            assert_eq!(m.recall == 1.0, t <= 0.5, "{t}");
        }
    }

    #[test]
    fn unconstrained_fallback() {
        let scores = [0.9f64, 0.9, 0.9, 0.2];
        let labels = [false, false, false, true];
        let r = sweep_threshold(
            &scores,
            &labels,
            &ThresholdPolicy::for_difficulty(Difficulty::Hard),
        )
        .unwrap();
        assert!(r.unconstrained);
        assert_eq!(r.threshold, 0.1);
        assert_eq!(r.metrics.precision, 0.25);
    }

    #[test]
    fn hard_policy() {
        let p = ThresholdPolicy::for_difficulty(Difficulty::Hard);
        assert_eq!(p.min_precision, 0.35);
        assert_eq!(p.objective, Objective::Recall);
    }

    #[test]
    fn empty_sweep_is_error() {
        let p = ThresholdPolicy::for_difficulty(Difficulty::Easy);
        assert!(sweep_threshold::<f64>(&[], &[], &p).is_err());
    }

    #[test]
    fn top_q_branch() {
        let scored = [
            ("a", "m", 0.9),
            ("b", "m", 0.8),
            ("c", "m", 0.95),
            ("a", "x", 0.1),
            ("b", "x", 0.1),
            ("c", "x", 0.1),
        ];
        let t = ProbeScoreTable::from_scores(&scored);
        let got = select_from_table(&t, "m", 2, 0.35, &|_| 0.0).unwrap();
        assert_eq!(got, vec!["c", "a"]);
        assert!(select_from_table(&t, "m", 0, 0.35, &|_| 0.0).is_err());
    }

    #[test]
    fn backfill_fills_to_q() {
        let scored = [
            ("a", "m", 0.9),
            ("b", "m", 0.5),
            ("a", "x", 0.1),
            ("b", "x", 0.4),
        ];
        let t = ProbeScoreTable::from_scores(&scored);
        let got =
            select_from_table(&t, "m", 5, 0.35, &|s| if s == "b" { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(got, vec!["a", "b"]);
    }

    #[test]
    fn claim_labels() {
        let scored = ClaimLabel::Other("x".into());
        assert_eq!(
            serde_json::to_string(&scored).unwrap(),
            r#"{"label":"other","model":"x"}"#
        );
    }
}
