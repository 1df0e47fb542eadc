//! Mini-batch Adam training with early stopping on the held-out fold.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::LossBreakdown;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, Metrics};
use crate::gnn::Mode;
use crate::graph::{Dataset, FoldAssignment};
use crate::model::{ForwardOptions, Model, ModelConfig, Prediction, PreparedEvent};
use crate::params::{Mat, ParamGrads, ParamStore};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.005,
            epochs_max: 100,
            patience: 15,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::out_of_range("batch_size", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::out_of_range("learning_rate", self.learning_rate));
        }
        if self.patience < 1 {
            return Err(Error::out_of_range("patience", self.patience));
        }
        if self.precision != Precision::F64 {
            return Err(Error::out_of_range("precision (only f64 is supported)", "f32"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, p)| Mat::zeros(p.raw_dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, hp: AdamHyper) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).dim();
        if state.m[id.0].dim() != shape {
            return Err(Error::Shape(format!("optimizer state for {}", store.name(id))));
        }
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = store.get_mut(id);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        };
        if grads.dense(id).is_some_and(|g| g.dim() != shape) {
            return Err(Error::Shape(format!("gradient for {}", store.name(id))));
        }
        match (grads.dense(id), grads.sparse_rows(id)) {
            (Some(g), None) => {
                ndarray::Zip::from(p)
                    .and(m)
                    .and(v)
                    .and(g)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
            (None, rows) => {
                // rows without a gradient still decay their moments
                let empty = std::collections::BTreeMap::new();
                let rows = rows.unwrap_or(&empty);
                for (r, ((mut p, mut m), mut v)) in
                    p.rows_mut().into_iter().zip(m.rows_mut()).zip(v.rows_mut()).enumerate()
                {
                    match rows.get(&r) {
                        Some(g) => ndarray::Zip::from(&mut p)
                            .and(&mut m)
                            .and(&mut v)
                            .and(g)
                            .for_each(|p, m, v, &g| update(p, m, v, g)),
                        None => ndarray::Zip::from(&mut p)
                            .and(&mut m)
                            .and(&mut v)
                            .for_each(|p, m, v| update(p, m, v, 0.0)),
                    }
                }
            }
            (Some(_), Some(_)) => {
                let g = grads.to_dense(id, shape);
                ndarray::Zip::from(p)
                    .and(m)
                    .and(v)
                    .and(&g)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub test_loss: f64,
    pub test_metrics: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
}

/// Loss and scores of the model on a set of events in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub scores: Vec<f64>,
    pub complement_scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn evaluate(model: &Model, events: &[PreparedEvent], seed: u64) -> Result<Evaluation> {
    let predictions: Vec<Prediction> = events
        .par_iter()
        .map(|ev| model.predict(ev, seed, None))
        .collect::<Result<_>>()?;
    let total: f64 = predictions.iter().map(|p| p.loss.total).sum();
    let scores = predictions.iter().map(|p| p.score).collect();
    let complement_scores = predictions.iter().map(|p| p.complement_score).collect();
    let labels = events.iter().map(|ev| ev.label().as_u8()).collect();
    Ok(Evaluation {
        mean_loss: total / events.len().max(1) as f64,
        scores,
        complement_scores,
        labels,
    })
}

const SHUFFLE_STREAM: u64 = 0x5ff1e;

/// Train `model` in place. Early stopping watches the mean loss on `monitor`
/// (the training set when `monitor` is empty); the parameters of the best
/// epoch are restored before returning.
pub fn train_on(
    model: &mut Model,
    train: &[PreparedEvent],
    monitor: &[PreparedEvent],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let batch = cfg.batch_size.min(train.len());
    let hp = AdamHyper::with_lr(cfg.learning_rate);
    let mut adam = AdamState::new(&model.store);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs_max {
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut sum = LossBreakdown {
            weights: model.config.loss,
            ..Default::default()
        };
        for chunk in order.chunks(batch) {
            // per-event passes in parallel, merged in batch order so the sum
            // does not depend on scheduling
            let per_event: Vec<Result<_>> = chunk
                .par_iter()
                .map(|&i| {
                    let ev = &train[i];
                    let mut rng = rng::event_stream(cfg.seed, ev.graph.event_id(), &[epoch as u64]);
                    let opts = ForwardOptions {
                        mode: Mode::Train,
                        ..Default::default()
                    };
                    model.loss_and_grads(ev, opts, &mut rng)
                })
                .collect();
            let mut grads = ParamGrads::new(model.store.len());
            for r in per_event {
                let (b, _, g) = match r {
                    Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch }),
                    other => other?,
                };
                sum.accumulate(&b);
                grads.merge(&g.params);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.all_finite() {
                return Err(Error::Divergence { epoch });
            }
            adam_step(&mut model.store, &grads, &mut adam, hp)?;
        }
        let train_mean = sum.scaled(1.0 / train.len() as f64);

        let watched = if monitor.is_empty() { train } else { monitor };
        let eval = evaluate(model, watched, cfg.seed)?;
        if !eval.mean_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let metrics = compute_metrics(&eval.scores, &eval.labels, 0.5).ok();
        history.epochs.push(EpochRecord {
            epoch,
            train: train_mean,
            test_loss: eval.mean_loss,
            test_metrics: metrics,
        });
        history.stop_epoch = epoch;

        if best.as_ref().is_none_or(|(l, _)| eval.mean_loss < *l) {
            best = Some((eval.mean_loss, model.store.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(history)
}

/// Train on every fold except `fold_id`, monitoring `fold_id`.
pub fn train(
    dataset: &Dataset,
    folds: &FoldAssignment,
    fold_id: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if fold_id >= folds.k {
        return Err(Error::out_of_range("fold", fold_id));
    }
    let fold_seed = rng::derive_seed(cfg.seed, &[fold_id as u64]);
    let mut model = Model::new(model_cfg.clone(), fold_seed)?;
    let prep = |idx: Vec<usize>| -> Vec<PreparedEvent> {
        idx.into_iter()
            .map(|i| model.prepare(dataset.events()[i].clone()))
            .collect()
    };
    let train_set = prep(folds.train_indices(fold_id));
    let test_set = prep(folds.test_indices(fold_id));
    let run_cfg = TrainConfig {
        seed: fold_seed,
        ..cfg.clone()
    };
    let history = train_on(&mut model, &train_set, &test_set, &run_cfg)?;
    Ok((model, history))
}
