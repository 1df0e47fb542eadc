//! The full pipeline for one event: encoder, attention stack, evidence
//! sampling, aggregation, classification and the training objective.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    aggregation_weights_on_tape, classify_frozen_on_tape, classify_on_tape, masked_pool_on_tape, total_loss_on_tape,
    ClassifierParams, LossBreakdown, LossWeights, DEFAULT_HIDDEN, DISTANCE_EPS, PROB_CLAMP,
};
use crate::autodiff::{EdgeIndex, Grads, Tape, Var};
use crate::diversity::{diversity_loss_on_tape, dpp_kernel_on_tape, EigenSign};
use crate::encoder::{encode_on_tape, event_tokens, Backend, EncoderParams};
use crate::error::{Error, Result};
use crate::gnn::{gnn_forward_on_tape, GnnParams, Mode, DEFAULT_LEAKY_SLOPE};
use crate::graph::{EventGraph, Label, DEFAULT_VOCAB_BITS};
use crate::params::{Mat, ParamStore};
use crate::rng;
use crate::sampler::{
    gumbel_noise, hard_round, k_hot, node_weights_on_tape, relaxed_topk_on_tape, Round, SamplerConfig,
};

/// Floor for `ln w` of node weights (weights are already ≥ eps).
const LOG_WEIGHT_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub dim: usize,
    pub vocab_bits: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::MeanEmbed,
            dim: 64,
            vocab_bits: DEFAULT_VOCAB_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dropout: 0.5,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Which parameters the counterfactual loss trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CounterfactualGrad {
    /// Only the selection path (masks, and through them the attention that
    /// produces node weights). Node features and the classifier are
    /// constants inside the complement branch.
    #[default]
    Selection,
    /// Every parameter the complement prediction depends on.
    Joint,
}

/// Everything that determines the parameter layout and the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gnn: GnnConfig,
    pub sampler: SamplerConfig,
    pub classifier_hidden: usize,
    pub loss: LossWeights,
    pub eigen_sign: EigenSign,
    pub counterfactual_grad: CounterfactualGrad,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gnn: GnnConfig::default(),
            sampler: SamplerConfig::default(),
            classifier_hidden: DEFAULT_HIDDEN,
            loss: LossWeights::default(),
            eigen_sign: EigenSign::Printed,
            counterfactual_grad: CounterfactualGrad::Selection,
        }
    }
}

/// An event with everything the forward pass reuses across epochs.
#[derive(Clone, Debug)]
pub struct PreparedEvent {
    pub graph: EventGraph,
    pub tokens: Vec<Vec<usize>>,
    pub edges: Arc<EdgeIndex>,
    pub adjacency: Vec<Vec<usize>>,
}

impl PreparedEvent {
    pub fn new(graph: EventGraph, vocab_bits: u32) -> Self {
        let tokens = event_tokens(&graph, vocab_bits);
        let edges = graph.message_edges();
        let adjacency = graph.adjacency();
        Self {
            graph,
            tokens,
            edges,
            adjacency,
        }
    }

    pub fn label(&self) -> Label {
        self.graph.label()
    }
}

/// How the discrete subgraph masks pass gradient to the sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Estimator {
    /// Hard masks forward, relaxed-mask gradient backward.
    #[default]
    StraightThrough,
    /// Relaxed masks forward and backward; the loss is then a smooth
    /// function of the parameters, which is what finite differences see.
    Relaxed,
}

/// Knobs of a single forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Gumbel noise per round; drawn from the pass's rng when absent.
    pub gumbel: Option<&'a [Vec<f64>]>,
    /// Additive noise on the encoder output.
    pub feature_noise: Option<&'a Mat>,
    pub estimator: Estimator,
}

/// Tape handles and discrete choices of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub total: Var,
    pub diversity: Var,
    pub classifier: Var,
    pub counterfactual: Var,
    pub probs: Var,
    pub complement_probs: Var,
    pub weights: Var,
    pub complement_weights: Var,
    pub rounds: Vec<Round>,
    pub soft_masks: Vec<Var>,
}

impl Forward {
    pub fn breakdown(&self, tape: &Tape<'_>, weights: LossWeights) -> LossBreakdown {
        LossBreakdown {
            diversity: tape.scalar(self.diversity),
            classifier: tape.scalar(self.classifier),
            counterfactual: tape.scalar(self.counterfactual),
            total: tape.scalar(self.total),
            weights,
        }
    }

    /// Probability of the true-rumor class.
    pub fn score(&self, tape: &Tape<'_>) -> f64 {
        tape.value(self.probs)[[0, 1]]
    }

    pub fn complement_score(&self, tape: &Tape<'_>) -> f64 {
        tape.value(self.complement_probs)[[0, 1]]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub gnn: GnnParams,
    pub classifier: ClassifierParams,
}

/// Result of scoring one event outside training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub complement_score: f64,
    pub loss: LossBreakdown,
    pub subgraphs: Vec<Vec<usize>>,
    pub complements: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    pub complement_weights: Vec<f64>,
}

/// Key separating evaluation noise from the training streams.
pub const EVAL_STREAM: u64 = u64::MAX;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.loss.validate()?;
        let mut rng = rng::stream(seed, &[rng::fnv1a64(b"init")]);
        let mut store = ParamStore::new();
        let d = config.encoder.dim;
        let encoder = EncoderParams::init(
            &mut store,
            d,
            config.encoder.vocab_bits,
            config.encoder.backend == Backend::Recurrent,
            &mut rng,
        );
        let mut gnn = GnnParams::init(&mut store, d, config.gnn.layers, config.gnn.dropout, &mut rng);
        gnn.leaky_slope = config.gnn.leaky_slope;
        let classifier = ClassifierParams::init(&mut store, d, config.classifier_hidden, config.gnn.dropout, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            gnn,
            classifier,
        })
    }

    pub fn prepare(&self, graph: EventGraph) -> PreparedEvent {
        PreparedEvent::new(graph, self.config.encoder.vocab_bits)
    }

    /// Record the whole pipeline for one event on `tape`.
    pub fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<'_>,
        ev: &PreparedEvent,
        opts: ForwardOptions<'_>,
        rng: &mut R,
    ) -> Result<Forward> {
        let g = &ev.graph;
        let n = g.n();
        if g.is_below_minimum() {
            return Err(Error::invalid(g.event_id(), "fewer than 2 posts"));
        }
        let cfg = &self.config;
        let k = cfg.sampler.subgraph_size(n)?;

        let h0 = encode_on_tape(tape, &ev.tokens, &self.encoder, cfg.encoder.backend, opts.feature_noise)?;
        let (h, attention) = gnn_forward_on_tape(tape, h0, &self.gnn, &ev.edges, opts.mode, rng)?;

        let w = node_weights_on_tape(tape, attention, &ev.edges, cfg.sampler.weight_eps);
        let w_vals: Vec<f64> = tape.value(w).iter().copied().collect();
        let log_w = tape.ln_floor(w, LOG_WEIGHT_FLOOR);
        let src = g.source();
        let not_source = Mat::from_shape_fn((1, n), |(_, j)| if j == src { 0.0 } else { 1.0 });

        let m = cfg.sampler.m;
        let mut rounds = Vec::with_capacity(m);
        let mut soft_masks = Vec::with_capacity(m);
        let mut pooled = Vec::with_capacity(m);
        let mut pooled_c = Vec::with_capacity(m);
        let mut kernels = Vec::with_capacity(m);
        let selection_only = cfg.counterfactual_grad == CounterfactualGrad::Selection;
        let h_c = if selection_only { tape.stop_grad(h) } else { h };
        for r in 0..m {
            let noise = match opts.gumbel {
                Some(all) => all
                    .get(r)
                    .filter(|v| v.len() == n)
                    .cloned()
                    .ok_or_else(|| Error::Shape(format!("injected noise missing or mis-sized for round {r}")))?,
                None => gumbel_noise(n, rng),
            };
            let noise_leaf = tape.row_vector(&noise);
            let round = hard_round(g, &ev.adjacency, &w_vals, k, noise)?;
            let keys = tape.add(log_w, noise_leaf);
            let soft = relaxed_topk_on_tape(tape, keys, k, cfg.sampler.temperature)?;
            let hard = tape.row_vector(&k_hot(n, &round.subgraph));
            let st = match opts.estimator {
                Estimator::StraightThrough => {
                    let frozen = tape.stop_grad(soft);
                    tape.sub(soft, frozen)
                }
                Estimator::Relaxed => tape.sub(soft, hard),
            };
            let mask = tape.add(hard, st);
            pooled.push(masked_pool_on_tape(tape, mask, h, round.subgraph.len()));

            let hard_c = tape.row_vector(&k_hot(n, &round.complement));
            let keep = tape.leaf(not_source.clone());
            let st_c = tape.mul(st, keep);
            let mask_c = tape.sub(hard_c, st_c);
            pooled_c.push(masked_pool_on_tape(tape, mask_c, h_c, round.complement.len()));

            let sub_h = tape.gather_rows(h, &round.subgraph);
            kernels.push(dpp_kernel_on_tape(tape, sub_h));
            soft_masks.push(soft);
            rounds.push(round);
        }

        let p = tape.concat_rows(&pooled);
        let weights = aggregation_weights_on_tape(tape, p, DISTANCE_EPS);
        let probs = classify_on_tape(tape, p, weights, &self.classifier, opts.mode, rng)?;
        let pc = tape.concat_rows(&pooled_c);
        let complement_weights = aggregation_weights_on_tape(tape, pc, DISTANCE_EPS);
        let complement_probs = if selection_only {
            classify_frozen_on_tape(tape, pc, complement_weights, &self.classifier, opts.mode, rng)?
        } else {
            classify_on_tape(tape, pc, complement_weights, &self.classifier, opts.mode, rng)?
        };

        let diversity = diversity_loss_on_tape(tape, &kernels, cfg.eigen_sign)?;
        let y = g.label().as_f64();
        let classifier = tape.binary_cross_entropy(probs, y, PROB_CLAMP);
        let counterfactual = tape.binary_cross_entropy(complement_probs, 1.0 - y, PROB_CLAMP);
        let total = total_loss_on_tape(tape, diversity, classifier, counterfactual, cfg.loss);
        Ok(Forward {
            total,
            diversity,
            classifier,
            counterfactual,
            probs,
            complement_probs,
            weights,
            complement_weights,
            rounds,
            soft_masks,
        })
    }

    /// Loss breakdown and parameter gradients for one event.
    pub fn loss_and_grads<R: Rng>(
        &self,
        ev: &PreparedEvent,
        opts: ForwardOptions<'_>,
        rng: &mut R,
    ) -> Result<(LossBreakdown, f64, Grads)> {
        let mut tape = Tape::new(&self.store);
        let f = self.forward_on_tape(&mut tape, ev, opts, rng)?;
        let b = f.breakdown(&tape, self.config.loss);
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!("loss on event {}", ev.graph.event_id())));
        }
        let score = f.score(&tape);
        Ok((b, score, tape.backward(f.total)))
    }

    /// Deterministic evaluation-mode pass; noise keyed by `(seed, event_id)`.
    pub fn predict(&self, ev: &PreparedEvent, seed: u64, feature_noise: Option<&Mat>) -> Result<Prediction> {
        let mut rng: ChaCha8Rng = rng::event_stream(seed, ev.graph.event_id(), &[EVAL_STREAM]);
        let mut tape = Tape::new(&self.store);
        let opts = ForwardOptions {
            mode: Mode::Eval,
            gumbel: None,
            feature_noise,
            estimator: Estimator::StraightThrough,
        };
        let f = self.forward_on_tape(&mut tape, ev, opts, &mut rng)?;
        Ok(Prediction {
            score: f.score(&tape),
            complement_score: f.complement_score(&tape),
            loss: f.breakdown(&tape, self.config.loss),
            subgraphs: f.rounds.iter().map(|r| r.subgraph.clone()).collect(),
            complements: f.rounds.iter().map(|r| r.complement.clone()).collect(),
            weights: tape.value(f.weights).iter().copied().collect(),
            complement_weights: tape.value(f.complement_weights).iter().copied().collect(),
        })
    }
}

/// Fresh generator for a seed, used where no stream is threaded through.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{fixtures, validate_event};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: 4,
                vocab_bits: 6,
                ..Default::default()
            },
            sampler: SamplerConfig {
                m: 2,
                kappa: 0.34,
                ..Default::default()
            },
            classifier_hidden: 5,
            ..Default::default()
        }
    }

    fn six_node_event() -> EventGraph {
        let texts = [
            "storm hits coast",
            "is this real",
            "confirmed by station",
            "fake",
            "source please",
            "real pictures",
        ];
        let parents = [None, Some(0), Some(0), Some(1), Some(2), Some(2)];
        let posts = (0..6u64)
            .map(|i| fixtures::post(i, parents[i as usize], i as f64 * 5.0, texts[i as usize]))
            .collect();
        validate_event(&fixtures::record("six", 1, posts)).unwrap()
    }

    #[test]
    fn forward_produces_valid_outputs() {
        let model = Model::new(small_config(), 1).unwrap();
        let ev = model.prepare(six_node_event());
        let p = model.predict(&ev, 3, None).unwrap();
        assert!((0.0..=1.0).contains(&p.score));
        assert_eq!(p.subgraphs.len(), 2);
        assert!(p.subgraphs.iter().all(|s| s.len() == 3));
        assert!(p.complements.iter().all(|c| c.contains(&0)));
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let b = p.loss;
        assert_eq!(b.total, b.diversity + b.classifier + b.counterfactual);
        assert_eq!(model.predict(&ev, 3, None).unwrap(), p);
    }

    #[test]
    fn below_minimum_events_are_rejected() {
        let model = Model::new(small_config(), 1).unwrap();
        let g = crate::graph::filter_by_deadline(&fixtures::chain("c", 3), 0.0);
        assert!(model.predict(&model.prepare(g), 0, None).is_err());
    }

    #[test]
    fn end_to_end_gradient_with_frozen_noise() {
        // finite differences see the derivative of the forward value, which
        // is the joint gradient
        let cfg = ModelConfig {
            counterfactual_grad: CounterfactualGrad::Joint,
            ..small_config()
        };
        let model = Model::new(cfg, 2).unwrap();
        let ev = model.prepare(six_node_event());
        let noise = vec![
            vec![0.3, -0.2, 1.1, 0.05, -0.7, 0.4],
            vec![-0.5, 0.9, 0.2, 1.4, 0.1, -0.3],
        ];
        let mut rows: Vec<usize> = ev.tokens.iter().flatten().copied().collect();
        rows.sort_unstable();
        rows.dedup();
        let ids: Vec<_> = model.store.ids().collect();
        let r = crate::gradcheck::check_params(
            &model.store,
            &ids,
            &[(model.encoder.token_embedding, rows)],
            1e-6,
            |_, tape| {
                let opts = ForwardOptions {
                    mode: Mode::Eval,
                    gumbel: Some(&noise),
                    feature_noise: None,
                    estimator: Estimator::Relaxed,
                };
                let mut rng = seeded(0);
                Ok(model.forward_on_tape(tape, &ev, opts, &mut rng)?.total)
            },
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
