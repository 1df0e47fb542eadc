//! Finite-difference verification of every differentiable stage on small
//! 6-node events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregation_weights_on_tape, classify_on_tape, ClassifierParams, DISTANCE_EPS, PROB_CLAMP};
use crate::autodiff::Var;
use crate::diversity::{diversity_loss_on_tape, dpp_kernel_on_tape, EigenSign};
use crate::encoder::{encode_on_tape, event_tokens, Backend, EncoderParams};
use crate::error::Result;
use crate::gnn::{gat_layer_on_tape, GnnParams, Mode};
use crate::gradcheck::{check_inputs, check_params, GradCheckReport};
use crate::graph::{validate_event, EventGraph, EventRecord, Post, Relation};
use crate::model::{CounterfactualGrad, EncoderConfig, Estimator, ForwardOptions, Model, ModelConfig};
use crate::params::{Mat, ParamStore};
use crate::sampler::{relaxed_topk_on_tape, SamplerConfig};

/// Tolerance when the computation involves an eigendecomposition.
pub const EIGEN_TOLERANCE: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_report(name: &str, r: GradCheckReport, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            tolerance,
            coordinates: r.coordinates,
            passed: r.max_rel_err <= tolerance,
        }
    }
}

/// A 6-post event: source with two replies, each with one or two replies.
pub fn six_node_event(label: u8) -> EventGraph {
    let texts = [
        "storm floods the coast tonight",
        "is this real",
        "confirmed by the weather station",
        "fake photo",
        "source please",
        "real pictures from the harbour",
    ];
    let parents = [None, Some(0), Some(0), Some(1), Some(2), Some(2)];
    let posts = (0..6)
        .map(|i| Post {
            id: i as u64,
            parent_id: parents[i].map(|p: usize| p as u64),
            text: texts[i].to_string(),
            time_offset_min: i as f64 * 7.0,
            relation: if i == 0 { Relation::Source } else { Relation::Reply },
        })
        .collect();
    validate_event(&EventRecord {
        event_id: "gradcheck".into(),
        label,
        posts,
        extra_edges: Vec::new(),
    })
    .expect("fixture is valid")
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Run every check; entries are in pipeline order.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let event = six_node_event(1);
    let edges = event.message_edges();
    let d = 4;
    let vocab_bits = 6;
    let tokens = event_tokens(&event, vocab_bits);
    let mut rows: Vec<usize> = tokens.iter().flatten().copied().collect();
    rows.sort_unstable();
    rows.dedup();
    let mut out = Vec::new();

    // encoder, both backends
    for backend in [Backend::MeanEmbed, Backend::Recurrent] {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&mut store, d, vocab_bits, backend == Backend::Recurrent, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        let probe = random_mat(6, d, &mut rng);
        let r = check_params(&store, &ids, &[(enc.token_embedding, rows.clone())], STEP, |_, tape| {
            let h = encode_on_tape(tape, &tokens, &enc, backend, None)?;
            let p = tape.leaf(probe.clone());
            let t = tape.tanh(h);
            let prod = tape.mul(t, p);
            Ok(tape.sum(prod))
        })?;
        let name = match backend {
            Backend::MeanEmbed => "encoder/mean_embed",
            Backend::Recurrent => "encoder/recurrent",
        };
        out.push(SuiteEntry::from_report(name, r, TOLERANCE));
    }

    // attention layer w.r.t. inputs and parameters
    {
        let mut store = ParamStore::new();
        let gnn = GnnParams::init(&mut store, d, 1, 0.0, &mut rng);
        let layer = gnn.layers[0];
        let h0 = random_mat(6, d, &mut rng);
        let probe = random_mat(6, d, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        let build = |tape: &mut crate::autodiff::Tape<'_>, h: Var| -> Result<Var> {
            let (out, _) = gat_layer_on_tape(tape, h, &layer, gnn.leaky_slope, &edges, None)?;
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(out, p);
            Ok(tape.sum(prod))
        };
        let r = check_params(&store, &ids, &[], STEP, |_, tape| {
            let h = tape.leaf(h0.clone());
            build(tape, h)
        })?;
        out.push(SuiteEntry::from_report("gnn/attention_layer_params", r, TOLERANCE));
        let r = {
            let mut tape = crate::autodiff::Tape::new(&store);
            let h = tape.leaf(h0.clone());
            let loss = build(&mut tape, h)?;
            let analytic: Vec<f64> = tape.backward(loss).wrt_or_zero(&tape, h).iter().copied().collect();
            let point: Vec<f64> = h0.iter().copied().collect();
            crate::gradcheck::grad_check(
                |x| {
                    let mut tape = crate::autodiff::Tape::new(&store);
                    let h = tape.leaf(Mat::from_shape_vec((6, d), x.to_vec()).expect("shape"));
                    build(&mut tape, h).map(|l| tape.scalar(l)).unwrap_or(f64::NAN)
                },
                &point,
                &analytic,
                STEP,
            )?
        };
        out.push(SuiteEntry::from_report("gnn/attention_layer_inputs", r, TOLERANCE));
    }

    // relaxed top-K w.r.t. log-weights
    {
        let logw = random_mat(1, 6, &mut rng);
        let noise = random_mat(1, 6, &mut rng);
        let probe = random_mat(1, 6, &mut rng);
        let r = check_inputs(&[logw], STEP, |tape, v| {
            let g = tape.leaf(noise.clone());
            let keys = tape.add(v[0], g);
            let m = relaxed_topk_on_tape(tape, keys, 2, 0.5)?;
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(m, p);
            Ok(tape.sum(prod))
        })?;
        out.push(SuiteEntry::from_report("sampler/relaxed_topk", r, TOLERANCE));
    }

    // diversity loss through the eigendecomposition
    {
        let subs: Vec<Mat> = (0..3).map(|_| random_mat(3, d, &mut rng)).collect();
        let r = check_inputs(&subs, STEP, |tape, v| {
            let ks: Vec<Var> = v.iter().map(|&h| dpp_kernel_on_tape(tape, h)).collect();
            diversity_loss_on_tape(tape, &ks, EigenSign::Printed)
        })?;
        out.push(SuiteEntry::from_report("diversity/spectral_loss", r, EIGEN_TOLERANCE));
    }

    // aggregation weights and classifier head, plus both losses
    {
        let mut store = ParamStore::new();
        let clf = ClassifierParams::init(&mut store, d, 5, 0.0, &mut rng);
        let pooled = random_mat(3, d, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for (name, target) in [
            ("aggregator/classifier_loss", 1.0),
            ("aggregator/counterfactual_loss", 0.0),
        ] {
            let r = check_params(&store, &ids, &[], STEP, |_, tape| {
                let h = tape.leaf(pooled.clone());
                let w = aggregation_weights_on_tape(tape, h, DISTANCE_EPS);
                let probs = classify_on_tape(tape, h, w, &clf, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
                Ok(tape.binary_cross_entropy(probs, target, PROB_CLAMP))
            })?;
            out.push(SuiteEntry::from_report(name, r, TOLERANCE));
        }
        let frozen = store.clone();
        let r = check_inputs(&[pooled], STEP, |tape, v| {
            let w = aggregation_weights_on_tape(tape, v[0], DISTANCE_EPS);
            // parameters enter as constants so only the pooled input varies
            let w_f = tape.leaf(frozen.get(clf.w_f).clone());
            let b_f = tape.leaf(frozen.get(clf.b_f).clone());
            let w_s = tape.leaf(frozen.get(clf.w_s).clone());
            let b_s = tape.leaf(frozen.get(clf.b_s).clone());
            let z = tape.matmul(w, v[0]);
            let hid = tape.matmul(z, w_f);
            let hid = tape.add_row(hid, b_f);
            let hid = tape.relu(hid);
            let logits = tape.matmul(hid, w_s);
            let logits = tape.add_row(logits, b_s);
            let probs = tape.softmax_rows(logits);
            Ok(tape.binary_cross_entropy(probs, 1.0, PROB_CLAMP))
        })?;
        out.push(SuiteEntry::from_report("aggregator/pooled_evidence", r, TOLERANCE));
    }

    // the whole objective, sampler noise frozen, relaxed masks
    {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                dim: d,
                vocab_bits,
                ..Default::default()
            },
            sampler: SamplerConfig {
                m: 2,
                kappa: 2.0 / 6.0,
                ..Default::default()
            },
            classifier_hidden: 5,
            counterfactual_grad: CounterfactualGrad::Joint,
            ..Default::default()
        };
        let model = Model::new(cfg, seed)?;
        let ev = model.prepare(event.clone());
        let noise: Vec<Vec<f64>> = (0..2).map(|_| crate::sampler::gumbel_noise(6, &mut rng)).collect();
        let ids: Vec<_> = model.store.ids().collect();
        let r = check_params(
            &model.store,
            &ids,
            &[(model.encoder.token_embedding, rows.clone())],
            STEP,
            |_, tape| {
                let opts = ForwardOptions {
                    mode: Mode::Eval,
                    gumbel: Some(&noise),
                    feature_noise: None,
                    estimator: Estimator::Relaxed,
                };
                Ok(model
                    .forward_on_tape(tape, &ev, opts, &mut ChaCha8Rng::seed_from_u64(0))?
                    .total)
            },
        )?;
        out.push(SuiteEntry::from_report("model/total_loss", r, EIGEN_TOLERANCE));
    }
    Ok(out)
}
