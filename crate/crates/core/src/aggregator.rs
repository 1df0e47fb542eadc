//! Evidence pooling, distance-based aggregation weights, the two-layer
//! classifier head and the three training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{dropout_mask, Mode};
use crate::params::{Mat, ParamId, ParamStore};

/// Floor applied to pairwise distances before the logarithm.
pub const DISTANCE_EPS: f64 = 1e-8;
/// Probability clamp inside the cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-12;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub dropout_rate: f64,
}

impl ClassifierParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dim: usize, hidden: usize, dropout_rate: f64, rng: &mut R) -> Self {
        Self {
            w_f: store.insert_uniform("classifier.w_f", dim, hidden, dim, rng),
            b_f: store.insert("classifier.b_f", Mat::zeros((1, hidden))),
            w_s: store.insert_uniform("classifier.w_s", hidden, 2, hidden, rng),
            b_s: store.insert("classifier.b_s", Mat::zeros((1, 2))),
            dropout_rate,
        }
    }

    fn check(&self, store: &ParamStore, dim: usize) -> Result<()> {
        let hidden = store.get(self.w_f).ncols();
        for (id, shape) in [
            (self.w_f, (dim, hidden)),
            (self.b_f, (1, hidden)),
            (self.w_s, (hidden, 2)),
            (self.b_s, (1, 2)),
        ] {
            if store.get(id).dim() != shape {
                return Err(Error::Shape(format!(
                    "{} is {:?}, expected {:?}",
                    store.name(id),
                    store.get(id).dim(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub distances: Vec<Vec<f64>>,
    pub log_sums: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Mean of the rows of `[K × d]` embeddings.
pub fn pool_subgraph(embeddings: &Mat) -> Result<Vec<f64>> {
    if embeddings.nrows() == 0 {
        return Err(Error::out_of_range("subgraph size", 0));
    }
    Ok(embeddings.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec())
}

/// `(mask · H) / size` for a `[1 × n]` mask over `[n × d]` features.
pub fn masked_pool_on_tape(tape: &mut Tape<'_>, mask: Var, h: Var, size: usize) -> Var {
    let s = tape.matmul(mask, h);
    tape.scale(s, 1.0 / size as f64)
}

/// Aggregation weights (softmax of log-distance sums) as a `[1 × m]` node.
pub fn aggregation_weights_on_tape(tape: &mut Tape<'_>, pooled: Var, eps: f64) -> Var {
    let ls = tape.log_distance_sums(pooled, eps);
    tape.softmax_rows(ls)
}

pub fn aggregation_weights(pooled: &[Vec<f64>], eps: f64) -> Result<AggregationState> {
    let m = pooled.len();
    if m == 0 {
        return Err(Error::out_of_range("evidence count", 0));
    }
    let d = pooled[0].len();
    if pooled.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("pooled vectors differ in width".into()));
    }
    let distances: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    pooled[i]
                        .iter()
                        .zip(&pooled[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let mut tape = Tape::detached();
    let p = tape.leaf(Mat::from_shape_fn((m, d), |(i, c)| pooled[i][c]));
    let ls = tape.log_distance_sums(p, eps);
    let w = tape.softmax_rows(ls);
    Ok(AggregationState {
        distances,
        log_sums: tape.value(ls).iter().copied().collect(),
        weights: tape.value(w).iter().copied().collect(),
    })
}

/// `softmax(ReLU((W·P) W_f + b_f) W_s + b_s)` as a `[1 × 2]` node.
pub fn classify_on_tape<R: Rng>(
    tape: &mut Tape<'_>,
    pooled: Var,
    weights: Var,
    params: &ClassifierParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    classify_impl(tape, pooled, weights, params, mode, false, rng)
}

/// Same forward value as [`classify_on_tape`], but the classifier
/// parameters enter as constants: gradients reach `pooled` and `weights`
/// only.
pub fn classify_frozen_on_tape<R: Rng>(
    tape: &mut Tape<'_>,
    pooled: Var,
    weights: Var,
    params: &ClassifierParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    classify_impl(tape, pooled, weights, params, mode, true, rng)
}

fn classify_impl<R: Rng>(
    tape: &mut Tape<'_>,
    pooled: Var,
    weights: Var,
    params: &ClassifierParams,
    mode: Mode,
    frozen: bool,
    rng: &mut R,
) -> Result<Var> {
    let param = |tape: &mut Tape<'_>, id| {
        let v = tape.param(id);
        if frozen {
            tape.stop_grad(v)
        } else {
            v
        }
    };
    let (m, d) = tape.shape(pooled);
    if tape.shape(weights) != (1, m) {
        return Err(Error::Shape(format!(
            "weights {:?} for {m} evidence rows",
            tape.shape(weights)
        )));
    }
    params.check(tape.params(), d)?;
    let z = tape.matmul(weights, pooled);
    let w_f = param(tape, params.w_f);
    let b_f = param(tape, params.b_f);
    let hid = tape.matmul(z, w_f);
    let hid = tape.add_row(hid, b_f);
    let mut hid = tape.relu(hid);
    if mode == Mode::Train && params.dropout_rate > 0.0 {
        let (r, c) = tape.shape(hid);
        let mask = tape.leaf(dropout_mask(r, c, params.dropout_rate, rng));
        hid = tape.mul(hid, mask);
    }
    let w_s = param(tape, params.w_s);
    let b_s = param(tape, params.b_s);
    let logits = tape.matmul(hid, w_s);
    let logits = tape.add_row(logits, b_s);
    Ok(tape.softmax_rows(logits))
}

pub fn classify<R: Rng>(
    pooled: &Mat,
    weights: &[f64],
    store: &ParamStore,
    params: &ClassifierParams,
    mode: Mode,
    rng: &mut R,
) -> Result<[f64; 2]> {
    let mut tape = Tape::new(store);
    let p = tape.leaf(pooled.clone());
    let w = tape.row_vector(weights);
    let probs = classify_on_tape(&mut tape, p, w, params, mode, rng)?;
    let v = tape.value(probs);
    Ok([v[[0, 0]], v[[0, 1]]])
}

fn cross_entropy(probs: [f64; 2], target: f64) -> f64 {
    let mut tape = Tape::detached();
    let p = tape.row_vector(&probs);
    let l = tape.binary_cross_entropy(p, target, PROB_CLAMP);
    tape.scalar(l)
}

pub fn classifier_loss(probs: [f64; 2], label: u8) -> f64 {
    cross_entropy(probs, label as f64)
}

/// Cross-entropy of the complement prediction against the opposite label.
pub fn counterfactual_loss(complement_probs: [f64; 2], label: u8) -> f64 {
    cross_entropy(complement_probs, 1.0 - label as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::out_of_range(name, v));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diversity: f64,
    pub classifier: f64,
    pub counterfactual: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Component-wise sum; the weights of `self` are kept.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.diversity += other.diversity;
        self.classifier += other.classifier;
        self.counterfactual += other.counterfactual;
        self.total += other.total;
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.diversity *= k;
        self.classifier *= k;
        self.counterfactual *= k;
        self.total *= k;
        self
    }
}

pub fn total_loss(diversity: f64, classifier: f64, counterfactual: f64, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        diversity,
        classifier,
        counterfactual,
        total: weights.alpha * diversity + weights.beta * classifier + weights.gamma * counterfactual,
        weights,
    })
}

/// Weighted total on the tape.
pub fn total_loss_on_tape(
    tape: &mut Tape<'_>,
    diversity: Var,
    classifier: Var,
    counterfactual: Var,
    w: LossWeights,
) -> Var {
    let a = tape.scale(diversity, w.alpha);
    let b = tape.scale(classifier, w.beta);
    let c = tape.scale(counterfactual, w.gamma);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}
