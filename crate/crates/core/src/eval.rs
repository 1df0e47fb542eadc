//! Metrics, cross-validation, robustness and early-detection experiments,
//! paired significance tests, and JSON/CSV reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::graph::{filter_by_deadline, perturb_event, split_folds, Dataset, EventGraph};
use crate::model::{Model, ModelConfig, PreparedEvent};
use crate::trainer::{evaluate, train, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(rename = "Prec")]
    pub precision: f64,
    #[serde(rename = "Rec")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "ACC")]
    pub accuracy: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "T")]
    pub true_class: ClassMetrics,
    #[serde(rename = "F")]
    pub false_class: ClassMetrics,
}

pub const METRIC_COLUMNS: [&str; 9] = ["ACC", "F1", "AUC", "T_Prec", "T_Rec", "T_F1", "F_Prec", "F_Rec", "F_F1"];

impl Metrics {
    pub fn to_array(&self) -> [f64; 9] {
        let (t, f) = (self.true_class, self.false_class);
        [
            self.accuracy,
            self.f1,
            self.auc,
            t.precision,
            t.recall,
            t.f1,
            f.precision,
            f.recall,
            f.f1,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            accuracy: a[0],
            f1: a[1],
            auc: a[2],
            true_class: ClassMetrics {
                precision: a[3],
                recall: a[4],
                f1: a[5],
            },
            false_class: ClassMetrics {
                precision: a[6],
                recall: a[7],
                f1: a[8],
            },
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mann–Whitney AUC with tied scores counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassAuc);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Predictions are `score ≥ threshold → 1`.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::out_of_range("event count", 0));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let class = |hit: usize, false_alarm: usize, miss: usize| {
        let p = ratio(hit, hit + false_alarm);
        let r = ratio(hit, hit + miss);
        ClassMetrics {
            precision: p,
            recall: r,
            f1: harmonic(p, r),
        }
    };
    let t = class(tp, fp, fneg);
    let f = class(tn, fneg, fp);
    Ok(Metrics {
        accuracy: ratio(tp + tn, scores.len()),
        f1: (t.f1 + f.f1) / 2.0,
        auc: auc(scores, labels)?,
        true_class: t,
        false_class: f,
    })
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let k = a.len();
    if k < 2 {
        return Err(Error::out_of_range("paired sample size", k));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    if var == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let t = mean / (var / k as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (k - 1) as f64).map_err(|e| Error::out_of_range("t degrees of freedom", e))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Cv,
    Robustness,
    Early,
}

/// Perturbed minus clean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    #[serde(rename = "ACC")]
    pub accuracy: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
}

impl MetricDelta {
    pub fn between(clean: &Metrics, perturbed: &Metrics) -> Self {
        Self {
            accuracy: perturbed.accuracy - clean.accuracy,
            f1: perturbed.f1 - clean.f1,
            auc: perturbed.auc - clean.auc,
        }
    }
}

/// One fold or sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// Sweep value (fold index, sigma, deadline in minutes); absent for ∞.
    pub axis: Option<f64>,
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<MetricDelta>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_nodes: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flip_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub mean: Metrics,
    pub std: Metrics,
    /// Effective configuration, echoed for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl ExperimentReport {
    pub fn new(kind: ExperimentKind, seed: u64, rows: Vec<ReportRow>, config: serde_json::Value) -> Self {
        let (mean, std) = summarize(rows.iter().map(|r| &r.metrics));
        Self {
            kind,
            seed,
            rows,
            mean,
            std,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per row: name, axis, the nine metric columns, deltas, extras.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,axis");
        for c in METRIC_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",dACC,dF1,dAUC,mean_nodes,flip_rate\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let axis = r.axis.map(|a| a.to_string()).unwrap_or_else(|| "inf".into());
            write!(out, "{},{}", r.name, axis).expect("string write");
            for v in r.metrics.to_array() {
                write!(out, ",{v}").expect("string write");
            }
            writeln!(
                out,
                ",{},{},{},{},{}",
                opt(r.delta.map(|d| d.accuracy)),
                opt(r.delta.map(|d| d.f1)),
                opt(r.delta.map(|d| d.auc)),
                opt(r.mean_nodes),
                opt(r.flip_rate)
            )
            .expect("string write");
        }
        out
    }
}

/// Mean and sample standard deviation (zero for a single row).
pub fn summarize<'a>(rows: impl Iterator<Item = &'a Metrics>) -> (Metrics, Metrics) {
    let arrays: Vec<[f64; 9]> = rows.map(Metrics::to_array).collect();
    let n = arrays.len();
    if n == 0 {
        return (Metrics::default(), Metrics::default());
    }
    let mut mean = [0.0; 9];
    for a in &arrays {
        for c in 0..9 {
            mean[c] += a[c] / n as f64;
        }
    }
    let mut std = [0.0; 9];
    if n > 1 {
        for a in &arrays {
            for c in 0..9 {
                std[c] += (a[c] - mean[c]).powi(2) / (n - 1) as f64;
            }
        }
        std.iter_mut().for_each(|v| *v = v.sqrt());
    }
    (Metrics::from_array(mean), Metrics::from_array(std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub threshold: f64,
    pub deadlines_min: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub edge_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            threshold: 0.5,
            deadlines_min: vec![0.0, 120.0, 240.0, 360.0],
            sigmas: vec![0.1, 0.5, 1.0],
            edge_rate: 0.0,
        }
    }
}

/// Share of events whose complement prediction lands on the other side of
/// the threshold from the evidence prediction.
pub fn flip_rate(model: &Model, events: &[PreparedEvent], seed: u64, threshold: f64) -> Result<f64> {
    let ev = evaluate(model, events, seed)?;
    Ok(flip_share(&ev.scores, &ev.complement_scores, threshold))
}

fn flip_share(scores: &[f64], complement_scores: &[f64], threshold: f64) -> f64 {
    let flips = scores
        .iter()
        .zip(complement_scores)
        .filter(|(s, c)| (**s >= threshold) != (**c >= threshold))
        .count();
    ratio(flips, scores.len())
}

/// Everything one trained fold exposes to callers of [`run_cv_with`].
pub struct FoldRun<'a> {
    pub fold: usize,
    pub model: &'a Model,
    pub history: &'a TrainHistory,
    pub train: Vec<&'a EventGraph>,
    pub test: Vec<PreparedEvent>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub metrics: Metrics,
}

impl FoldRun<'_> {
    /// Majority label of the training folds.
    pub fn majority_label(&self) -> u8 {
        let ones = self.train.iter().filter(|e| e.label().as_u8() == 1).count();
        (2 * ones > self.train.len()) as u8
    }
}

/// k-fold cross-validation; `per_fold` sees every trained model before it is
/// dropped. Folds, training noise and evaluation noise derive from the
/// training seed.
pub fn run_cv_with<F>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    mut per_fold: F,
) -> Result<ExperimentReport>
where
    F: FnMut(&FoldRun<'_>) -> Result<()>,
{
    let folds = split_folds(dataset, eval_cfg.folds, train_cfg.seed)?;
    let mut rows = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (model, history) = train(dataset, &folds, fold, model_cfg, train_cfg)?;
        let test: Vec<PreparedEvent> = folds
            .test_indices(fold)
            .into_iter()
            .map(|i| model.prepare(dataset.events()[i].clone()))
            .collect();
        let ev = evaluate(&model, &test, train_cfg.seed)?;
        let metrics = compute_metrics(&ev.scores, &ev.labels, eval_cfg.threshold)?;
        let flips = flip_share(&ev.scores, &ev.complement_scores, eval_cfg.threshold);
        let run = FoldRun {
            fold,
            model: &model,
            history: &history,
            train: folds
                .train_indices(fold)
                .into_iter()
                .map(|i| &dataset.events()[i])
                .collect(),
            test,
            scores: ev.scores,
            labels: ev.labels,
            metrics,
        };
        per_fold(&run)?;
        rows.push(ReportRow {
            name: format!("fold{fold}"),
            axis: Some(fold as f64),
            metrics,
            delta: None,
            mean_nodes: None,
            flip_rate: Some(flips),
        });
    }
    let echo = serde_json::json!({
        "model": model_cfg,
        "trainer": train_cfg,
        "eval": eval_cfg,
        "dataset": dataset.name,
    });
    Ok(ExperimentReport::new(ExperimentKind::Cv, train_cfg.seed, rows, echo))
}

pub fn run_cv(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<ExperimentReport> {
    run_cv_with(dataset, model_cfg, train_cfg, eval_cfg, |_| Ok(()))
}

/// Clean metrics, then one row per sigma with Gaussian feature noise and
/// `edge_rate` edge toggles; deltas are perturbed minus clean.
pub fn robustness_eval(
    model: &Model,
    events: &[EventGraph],
    sigmas: &[f64],
    edge_rate: f64,
    seed: u64,
    threshold: f64,
) -> Result<ExperimentReport> {
    let labels: Vec<u8> = events.iter().map(|e| e.label().as_u8()).collect();
    let clean_scores = events
        .par_iter()
        .map(|e| Ok(model.predict(&model.prepare(e.clone()), seed, None)?.score))
        .collect::<Result<Vec<_>>>()?;
    let clean = compute_metrics(&clean_scores, &labels, threshold)?;
    let dim = model.config.encoder.dim;
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if !(sigma >= 0.0) {
            return Err(Error::out_of_range("sigma", sigma));
        }
        let scores = events
            .par_iter()
            .map(|e| {
                let p = perturb_event(e, sigma, edge_rate, dim, seed);
                let noise = (sigma > 0.0).then_some(&p.feature_noise);
                Ok(model.predict(&model.prepare(p.event), seed, noise)?.score)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = compute_metrics(&scores, &labels, threshold)?;
        rows.push(ReportRow {
            name: format!("sigma={sigma}"),
            axis: Some(sigma),
            metrics: m,
            delta: Some(MetricDelta::between(&clean, &m)),
            mean_nodes: None,
            flip_rate: None,
        });
    }
    let echo = serde_json::json!({ "sigmas": sigmas, "edge_rate": edge_rate, "clean": clean });
    Ok(ExperimentReport::new(ExperimentKind::Robustness, seed, rows, echo))
}

/// Metrics when only posts up to each deadline are visible, plus a final
/// row for the unrestricted graph. Events left with a single post get
/// `fallback_label` as their prediction.
pub fn early_detection_eval(
    model: &Model,
    events: &[EventGraph],
    deadlines_min: &[f64],
    fallback_label: u8,
    seed: u64,
    threshold: f64,
) -> Result<ExperimentReport> {
    if deadlines_min.is_empty() {
        return Err(Error::out_of_range("deadline count", 0));
    }
    let labels: Vec<u8> = events.iter().map(|e| e.label().as_u8()).collect();
    let mut rows = Vec::with_capacity(deadlines_min.len() + 1);
    let points = deadlines_min.iter().map(|&d| Some(d)).chain(std::iter::once(None));
    for deadline in points {
        let scored = events
            .par_iter()
            .map(|e| {
                let g = match deadline {
                    Some(d) => filter_by_deadline(e, d),
                    None => e.clone(),
                };
                let n = g.n();
                let score = if g.is_below_minimum() {
                    fallback_label as f64
                } else {
                    model.predict(&model.prepare(g), seed, None)?.score
                };
                Ok((n, score))
            })
            .collect::<Result<Vec<_>>>()?;
        let nodes: usize = scored.iter().map(|(n, _)| n).sum();
        let scores: Vec<f64> = scored.into_iter().map(|(_, s)| s).collect();
        let metrics = compute_metrics(&scores, &labels, threshold)?;
        rows.push(ReportRow {
            name: match deadline {
                Some(d) => format!("deadline={d}"),
                None => "deadline=inf".into(),
            },
            axis: deadline,
            metrics,
            delta: None,
            mean_nodes: Some(nodes as f64 / events.len().max(1) as f64),
            flip_rate: None,
        });
    }
    let echo = serde_json::json!({ "deadlines_min": deadlines_min, "fallback_label": fallback_label });
    Ok(ExperimentReport::new(ExperimentKind::Early, seed, rows, echo))
}
