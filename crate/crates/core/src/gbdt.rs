//! Binary gradient-boosted regression trees with logistic loss.
//!
//! Trees grow level-wise with exact greedy splits at midpoints between
//! consecutive distinct feature values. Leaf weights use L1 soft-thresholding
//! and L2 shrinkage of the summed gradients; the learning rate is folded into
//! stored leaf weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub row_subsample: f64,
    pub column_subsample: f64,
    pub l1: f64,
    pub l2: f64,
    pub min_child_weight: f64,
    pub early_stop_rounds: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            rounds: 500,
            learning_rate: 0.1,
            row_subsample: 0.8,
            column_subsample: 0.8,
            l1: 0.1,
            l2: 1.0,
            min_child_weight: 1.0,
            early_stop_rounds: 30,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} must be in (0, 1], got {v}"
                )))
            }
        };
        rate("learning_rate", self.learning_rate)?;
        rate("row_subsample", self.row_subsample)?;
        rate("column_subsample", self.column_subsample)?;
        if self.l1 < 0.0 || self.l2 < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "regularization terms must be >= 0".into(),
            ));
        }
        if self.rounds == 0 || self.max_depth == 0 {
            return Err(Error::InvalidArgument(
                "rounds and max_depth must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node<F> {
    Split {
        feature: usize,
        threshold: F,
        left: usize,
        right: usize,
        gain: F,
    },
    Leaf {
        weight: F,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<F> {
    pub nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tree<F> {
    pub fn predict(&self, x: &[F]) -> F {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble<F> {
    pub n_features: usize,
    /// Initial margin (log-odds).
    pub base_margin: F,
    pub trees: Vec<Tree<F>>,
    /// Summed split gain per feature over all kept trees.
    pub gain_importance: Vec<F>,
    /// Rounds actually kept after early stopping.
    pub best_round: usize,
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

impl<F: Scalar> Ensemble<F> {
    pub fn margin(&self, x: &[F]) -> F {
        self.trees
            .iter()
            .fold(self.base_margin, |acc, t| acc + t.predict(x))
    }

    pub fn predict_proba(&self, x: &[F]) -> F {
        sigmoid(self.margin(x))
    }
}

fn soft_threshold<F: Scalar>(g: F, alpha: F) -> F {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        F::zero()
    }
}

struct Reg<F> {
    l1: F,
    l2: F,
}

impl<F: Scalar> Reg<F> {
    fn score(&self, g: F, h: F) -> F {
        let t = soft_threshold(g, self.l1);
        t * t / (h + self.l2)
    }

    fn weight(&self, g: F, h: F) -> F {
        -soft_threshold(g, self.l1) / (h + self.l2)
    }
}

#[derive(Clone, Copy)]
struct Best<F> {
    gain: F,
    feature: usize,
    threshold: F,
}

/// Per-node scan state while sweeping one feature's sorted rows.
#[derive(Clone, Copy)]
struct Scan<F> {
    g: F,
    h: F,
    last: Option<F>,
}

fn weighted_logloss<F: Scalar>(margins: &[F], y: &[bool]) -> F {
    let eps = F::of(1e-15);
    let total: F = margins
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            let p = sigmoid(m).max(eps).min(F::one() - eps);
            if t {
                -p.ln()
            } else {
                -(F::one() - p).ln()
            }
        })
        .sum();
    total / F::of_usize(margins.len().max(1))
}

struct Grower<'a, F> {
    x: &'a [Vec<F>],
    sorted: &'a [Vec<usize>],
    params: &'a TreeParams,
    reg: Reg<F>,
    lr: F,
}

impl<F: Scalar> Grower<'_, F> {
    fn grow(
        &self,
        grad: &[F],
        hess: &[F],
        rows: &[usize],
        cols: &[usize],
        importance: &mut [F],
    ) -> Tree<F> {
        let n = self.x.len();
        let min_child = F::of(self.params.min_child_weight);
        let mut nodes: Vec<Node<F>> = vec![Node::Leaf { weight: F::zero() }];
        // node index of each row, usize::MAX when not sampled
        let mut node_of = vec![usize::MAX; n];
        for &r in rows {
            node_of[r] = 0;
        }
        let mut totals = vec![(F::zero(), F::zero())];
        for &r in rows {
            totals[0].0 = totals[0].0 + grad[r];
            totals[0].1 = totals[0].1 + hess[r];
        }
        let mut frontier = vec![0usize];

        for _depth in 0..self.params.max_depth {
            if frontier.is_empty() {
                break;
            }
            // slot per frontier node
            let mut slot = vec![usize::MAX; nodes.len()];
            for (s, &nd) in frontier.iter().enumerate() {
                slot[nd] = s;
            }
            let mut best: Vec<Option<Best<F>>> = vec![None; frontier.len()];
            for &f in cols {
                let mut scan = vec![
                    Scan {
                        g: F::zero(),
                        h: F::zero(),
                        last: None
                    };
                    frontier.len()
                ];
                for &r in &self.sorted[f] {
                    let nd = node_of[r];
                    if nd == usize::MAX || slot[nd] == usize::MAX {
                        continue;
                    }
                    let s = slot[nd];
                    let v = self.x[r][f];
                    let st = scan[s];
                    if let Some(prev) = st.last {
                        if v > prev {
                            let (gt, ht) = totals[nd];
                            let (gl, hl) = (st.g, st.h);
                            let (gr, hr) = (gt - gl, ht - hl);
                            if hl >= min_child && hr >= min_child {
                                let gain = F::of(0.5)
                                    * (self.reg.score(gl, hl) + self.reg.score(gr, hr)
                                        - self.reg.score(gt, ht));
                                if gain > F::zero() && best[s].is_none_or(|b| gain > b.gain) {
                                    best[s] = Some(Best {
                                        gain,
                                        feature: f,
                                        threshold: (prev + v) / F::of(2.0),
                                    });
                                }
                            }
                        }
                    }
                    scan[s] = Scan {
                        g: st.g + grad[r],
                        h: st.h + hess[r],
                        last: Some(v),
                    };
                }
            }

            let mut next = Vec::new();
            let mut child_of: Vec<Option<(usize, usize, usize, F)>> = vec![None; nodes.len()];
            for (s, &nd) in frontier.iter().enumerate() {
                let Some(b) = best[s] else { continue };
                let left = nodes.len();
                nodes.push(Node::Leaf { weight: F::zero() });
                nodes.push(Node::Leaf { weight: F::zero() });
                totals.push((F::zero(), F::zero()));
                totals.push((F::zero(), F::zero()));
                nodes[nd] = Node::Split {
                    feature: b.feature,
                    threshold: b.threshold,
                    left,
                    right: left + 1,
                    gain: b.gain,
                };
                importance[b.feature] = importance[b.feature] + b.gain;
                child_of[nd] = Some((b.feature, left, left + 1, b.threshold));
                next.push(left);
                next.push(left + 1);
            }
            child_of.resize(nodes.len(), None);
            for &r in rows {
                let nd = node_of[r];
                if let Some((f, l, rt, thr)) = child_of[nd] {
                    let c = if self.x[r][f] < thr { l } else { rt };
                    node_of[r] = c;
                    totals[c].0 = totals[c].0 + grad[r];
                    totals[c].1 = totals[c].1 + hess[r];
                }
            }
            frontier = next;
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf { weight } = node {
                let (g, h) = totals[i];
                *weight = self.reg.weight(g, h) * self.lr;
            }
        }
        Tree { nodes }
    }
}

/// Training rows with labels and per-row weights.
pub struct TrainSet<'a, F> {
    pub x: &'a [Vec<F>],
    pub y: &'a [bool],
    pub weight: &'a [F],
}

/// Fits a boosted ensemble. With a validation set, training stops after
/// `early_stop_rounds` rounds without a lower validation log-loss and the
/// ensemble is truncated to its best round.
pub fn fit<F: Scalar>(
    train: &TrainSet<'_, F>,
    valid: Option<(&[Vec<F>], &[bool])>,
    params: &TreeParams,
    seed: u64,
) -> Result<Ensemble<F>> {
    params.validate()?;
    let n = train.x.len();
    if n == 0 {
        return Err(Error::EmptyInput("training rows"));
    }
    if train.y.len() != n || train.weight.len() != n {
        return Err(Error::InvalidArgument(
            "rows, labels and weights differ in length".into(),
        ));
    }
    let d = train.x[0].len();
    if train.x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("ragged feature rows".into()));
    }

    let sorted: Vec<Vec<usize>> = (0..d)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                train.x[a][f]
                    .partial_cmp(&train.x[b][f])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();
    let grower = Grower {
        x: train.x,
        sorted: &sorted,
        params,
        reg: Reg {
            l1: F::of(params.l1),
            l2: F::of(params.l2),
        },
        lr: F::of(params.learning_rate),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_margin = F::zero();
    let mut margins = vec![base_margin; n];
    let mut valid_margins = valid.map(|(vx, _)| vec![base_margin; vx.len()]);
    let mut trees = Vec::new();
    let mut importance_by_round: Vec<Vec<(usize, F)>> = Vec::new();
    let mut best = (F::infinity(), 0usize);
    let n_cols = ((d as f64 * params.column_subsample).round() as usize).clamp(1, d.max(1));
    let mut grad = vec![F::zero(); n];
    let mut hess = vec![F::zero(); n];

    for round in 0..params.rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let y = if train.y[i] { F::one() } else { F::zero() };
            grad[i] = train.weight[i] * (p - y);
            hess[i] = train.weight[i] * p * (F::one() - p);
        }
        let rows: Vec<usize> = (0..n)
            .filter(|_| rng.random::<f64>() < params.row_subsample)
            .collect();
        let mut cols: Vec<usize> = (0..d).collect();
        cols.shuffle(&mut rng);
        cols.truncate(n_cols);
        cols.sort_unstable();

        let mut importance = vec![F::zero(); d];
        let tree = grower.grow(&grad, &hess, &rows, &cols, &mut importance);
        for (i, m) in margins.iter_mut().enumerate() {
            *m = *m + tree.predict(&train.x[i]);
        }
        if !weighted_logloss(&margins, train.y).is_finite() {
            return Err(Error::Diverged { round });
        }
        importance_by_round.push(
            importance
                .iter()
                .enumerate()
                .filter(|(_, g)| **g > F::zero())
                .map(|(f, g)| (f, *g))
                .collect(),
        );

        if let (Some((vx, vy)), Some(vm)) = (valid, valid_margins.as_mut()) {
            for (i, m) in vm.iter_mut().enumerate() {
                *m = *m + tree.predict(&vx[i]);
            }
            trees.push(tree);
            let loss = weighted_logloss(vm, vy);
            if loss < best.0 {
                best = (loss, round);
            } else if round - best.1 >= params.early_stop_rounds {
                break;
            }
        } else {
            trees.push(tree);
            best.1 = round;
        }
    }

    let keep = best.1 + 1;
    trees.truncate(keep);
    let mut gain_importance = vec![F::zero(); d];
    for round in importance_by_round.iter().take(keep) {
        for &(f, g) in round {
            gain_importance[f] = gain_importance[f] + g;
        }
    }
    Ok(Ensemble {
        n_features: d,
        base_margin,
        trees,
        gain_importance,
        best_round: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let a = i as f64 / 10.0;
            x.push(vec![a, (i % 7) as f64]);
            y.push(a >= 2.0);
        }
        (x, y)
    }

    #[test]
    fn separable_data_is_learned() {
        let (x, y) = separable();
        let w = vec![1.0; x.len()];
        let params = TreeParams {
            rounds: 50,
            row_subsample: 1.0,
            column_subsample: 1.0,
            ..TreeParams::default()
        };
        let e = fit(
            &TrainSet {
                x: &x,
                y: &y,
                weight: &w,
            },
            None,
            &params,
            1,
        )
        .unwrap();
        for (r, &t) in x.iter().zip(&y) {
            assert_eq!(e.predict_proba(r) >= 0.5, t);
        }
        assert!(e.gain_importance[0] > e.gain_importance[1]);
    }

    #[test]
    fn split_sits_at_midpoint() {
        let x = vec![vec![1.0f64], vec![3.0]];
        let y = vec![false, true];
        let w = vec![5.0, 5.0];
        let params = TreeParams {
            rounds: 1,
            row_subsample: 1.0,
            column_subsample: 1.0,
            min_child_weight: 0.0,
            ..TreeParams::default()
        };
        let e = fit(
            &TrainSet {
                x: &x,
                y: &y,
                weight: &w,
            },
            None,
            &params,
            0,
        )
        .unwrap();
        match &e.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 2.0),
            n => panic!("expected split, got {n:?}"),
        }
    }

    #[test]
    fn leaf_weight_regularization() {
        // single leaf: G = sum w(p - y) with p = 0.5
        let reg = Reg {
            l1: 0.1f64,
            l2: 1.0,
        };
        assert!((reg.weight(-2.0, 1.0) - 0.95).abs() < 1e-12);
        assert_eq!(reg.weight(0.05, 1.0), 0.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, y) = separable();
        let w = vec![1.0; x.len()];
        let p = TreeParams {
            rounds: 20,
            ..TreeParams::default()
        };
        let a = fit(
            &TrainSet {
                x: &x,
                y: &y,
                weight: &w,
            },
            None,
            &p,
            9,
        )
        .unwrap();
        let b = fit(
            &TrainSet {
                x: &x,
                y: &y,
                weight: &w,
            },
            None,
            &p,
            9,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stopping_truncates() {
        let (x, y) = separable();
        let w = vec![1.0; x.len()];
        let noisy_y: Vec<bool> = y.iter().map(|t| !t).collect();
        let p = TreeParams {
            rounds: 200,
            early_stop_rounds: 5,
            ..TreeParams::default()
        };
        let e = fit(
            &TrainSet {
                x: &x,
                y: &y,
                weight: &w,
            },
            Some((&x, &noisy_y)),
            &p,
            3,
        )
        .unwrap();
        assert!(e.trees.len() < 200);
        assert_eq!(e.trees.len(), e.best_round + 1);
    }

    #[test]
    fn probabilities_stay_open_interval() {
        let (x, y) = separable();
        let w = vec![1.0; x.len()];
        let e = fit(
            &TrainSet {
                x: &x,
                y: &y,
                weight: &w,
            },
            None,
            &TreeParams::default(),
            0,
        )
        .unwrap();
        for r in &x {
            let p = e.predict_proba(r);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn rejects_bad_rates() {
        let p = TreeParams {
            row_subsample: 0.0,
            ..TreeParams::default()
        };
        assert!(p.validate().is_err());
    }
}
