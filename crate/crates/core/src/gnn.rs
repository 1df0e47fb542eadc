//! GATv2-style attention layers with residual updates.
//!
//! Per layer, with `P = H·W_a[..d]` and `Q = H·W_a[d..]`:
//!
//! ```text
//! e_ij = b · LeakyReLU(P_i + Q_j)          (= bᵀ LeakyReLU(W_aᵀ [h_i ‖ h_j]))
//! a_ij = softmax_{j ∈ N(i)} e_ij
//! h_i' = ReLU(Σ_j a_ij · (H W_u)_j) + h_i
//! ```
//!
//! `N(i)` is the symmetrised skeleton plus a self-loop.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{EdgeIndex, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Mat, ParamId, ParamStore};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatLayerParams {
    /// `[2d × d]`
    pub w_a: ParamId,
    /// `[1 × d]`
    pub b_vec: ParamId,
    /// `[d × d]`
    pub w_u: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub layers: Vec<GatLayerParams>,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
}

impl GnnParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dim: usize, k_layers: usize, dropout_rate: f64, rng: &mut R) -> Self {
        let layers = (0..k_layers)
            .map(|l| GatLayerParams {
                w_a: store.insert_uniform(format!("gnn.{l}.w_a"), 2 * dim, dim, dim, rng),
                b_vec: store.insert_uniform(format!("gnn.{l}.b_vec"), 1, dim, dim, rng),
                w_u: store.insert_uniform(format!("gnn.{l}.w_u"), dim, dim, dim, rng),
            })
            .collect();
        Self {
            layers,
            dropout_rate,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Attention weights on the message edges of one event.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub edges: Arc<EdgeIndex>,
    /// `values[k]` is `a_{center_k, neighbor_k}`.
    pub values: Vec<f64>,
}

impl AttentionMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.edges
            .edges_of(i)
            .find(|&k| self.edges.neighbor[k] == j)
            .map_or(0.0, |k| self.values[k])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.edges.n)
            .map(|i| self.edges.edges_of(i).map(|k| self.values[k]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros((self.edges.n, self.edges.n));
        for k in 0..self.edges.len() {
            m[[self.edges.center[k], self.edges.neighbor[k]]] = self.values[k];
        }
        m
    }
}

fn check_layer(store: &ParamStore, layer: &GatLayerParams, d: usize) -> Result<()> {
    for (id, shape) in [(layer.w_a, (2 * d, d)), (layer.b_vec, (1, d)), (layer.w_u, (d, d))] {
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

/// Normalised attention as a `[1 × E]` tape node.
pub fn attention_on_tape(
    tape: &mut Tape<'_>,
    h: Var,
    layer: &GatLayerParams,
    slope: f64,
    edges: &Arc<EdgeIndex>,
) -> Result<Var> {
    let (n, d) = tape.shape(h);
    if n != edges.n {
        return Err(Error::Shape(format!("{n} feature rows for {} nodes", edges.n)));
    }
    check_layer(tape.params(), layer, d)?;
    let w_a = tape.param(layer.w_a);
    let w_top = tape.slice_rows(w_a, 0, d);
    let w_bot = tape.slice_rows(w_a, d, d);
    let p = tape.matmul(h, w_top);
    let q = tape.matmul(h, w_bot);
    let b = tape.param(layer.b_vec);
    let e = tape.edge_scores(p, q, b, slope, edges.clone());
    Ok(tape.segment_softmax(e, edges.clone()))
}

/// One attention layer. `dropout_mask`, when given, multiplies the
/// activated aggregate (already scaled by `1/(1−rate)`).
pub fn gat_layer_on_tape(
    tape: &mut Tape<'_>,
    h: Var,
    layer: &GatLayerParams,
    slope: f64,
    edges: &Arc<EdgeIndex>,
    dropout_mask: Option<Mat>,
) -> Result<(Var, Var)> {
    let a = attention_on_tape(tape, h, layer, slope, edges)?;
    let w_u = tape.param(layer.w_u);
    let m = tape.matmul(h, w_u);
    let agg = tape.edge_aggregate(a, m, edges.clone());
    let mut act = tape.relu(agg);
    if let Some(mask) = dropout_mask {
        if mask.dim() != tape.shape(act) {
            return Err(Error::Shape(format!("dropout mask {:?}", mask.dim())));
        }
        let mask = tape.leaf(mask);
        act = tape.mul(act, mask);
    }
    Ok((tape.add(act, h), a))
}

pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Mat {
    let keep = 1.0 - rate;
    Mat::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// Stack of layers; returns the refined features and the last layer's attention.
pub fn gnn_forward_on_tape<R: Rng>(
    tape: &mut Tape<'_>,
    h0: Var,
    params: &GnnParams,
    edges: &Arc<EdgeIndex>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Var)> {
    if params.layers.is_empty() {
        return Err(Error::out_of_range("gnn.layers", 0));
    }
    let (n, d) = tape.shape(h0);
    let mut h = h0;
    let mut last = None;
    for layer in &params.layers {
        let mask =
            (mode == Mode::Train && params.dropout_rate > 0.0).then(|| dropout_mask(n, d, params.dropout_rate, rng));
        let (next, a) = gat_layer_on_tape(tape, h, layer, params.leaky_slope, edges, mask)?;
        h = next;
        last = Some(a);
    }
    Ok((h, last.expect("at least one layer")))
}

pub fn attention_coefficients(
    h: &Mat,
    store: &ParamStore,
    layer: &GatLayerParams,
    slope: f64,
    edges: &Arc<EdgeIndex>,
) -> Result<AttentionMatrix> {
    let mut tape = Tape::new(store);
    let hv = tape.leaf(h.clone());
    let a = attention_on_tape(&mut tape, hv, layer, slope, edges)?;
    Ok(AttentionMatrix {
        edges: edges.clone(),
        values: tape.value(a).iter().copied().collect(),
    })
}

pub fn gat_layer(
    h: &Mat,
    store: &ParamStore,
    layer: &GatLayerParams,
    slope: f64,
    edges: &Arc<EdgeIndex>,
    dropout_mask: Option<Mat>,
) -> Result<Mat> {
    let mut tape = Tape::new(store);
    let hv = tape.leaf(h.clone());
    let (out, _) = gat_layer_on_tape(&mut tape, hv, layer, slope, edges, dropout_mask)?;
    Ok(tape.value(out).clone())
}

pub fn gnn_forward<R: Rng>(
    h0: &Mat,
    store: &ParamStore,
    params: &GnnParams,
    edges: &Arc<EdgeIndex>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Mat, AttentionMatrix)> {
    let mut tape = Tape::new(store);
    let hv = tape.leaf(h0.clone());
    let (h, a) = gnn_forward_on_tape(&mut tape, hv, params, edges, mode, rng)?;
    Ok((
        tape.value(h).clone(),
        AttentionMatrix {
            edges: edges.clone(),
            values: tape.value(a).iter().copied().collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_edges(n: usize) -> Arc<EdgeIndex> {
        let pairs = (1..n)
            .flat_map(|i| [(i - 1, i), (i, i - 1)])
            .chain((0..n).map(|i| (i, i)));
        Arc::new(EdgeIndex::from_pairs(n, pairs))
    }

    fn setup(d: usize, layers: usize, seed: u64) -> (ParamStore, GnnParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GnnParams::init(&mut store, d, layers, 0.5, &mut rng);
        (store, p)
    }

    fn random_h(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_neighbor_gets_full_attention() {
        let (store, p) = setup(3, 1, 1);
        let edges = Arc::new(EdgeIndex::from_pairs(2, [(0, 1), (1, 0)]));
        let a = attention_coefficients(&random_h(2, 3, 2), &store, &p.layers[0], 0.2, &edges).unwrap();
        assert_eq!(a.values, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let (store, p) = setup(3, 1, 1);
        let edges = Arc::new(EdgeIndex::from_pairs(3, [(0, 1), (0, 2)]));
        let mut h = random_h(3, 3, 5);
        let r = h.row(1).to_owned();
        h.row_mut(2).assign(&r);
        let a = attention_coefficients(&h, &store, &p.layers[0], 0.2, &edges).unwrap();
        assert!((a.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((a.get(0, 2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_update_matrix_is_pure_residual() {
        let (mut store, p) = setup(3, 1, 1);
        store.get_mut(p.layers[0].w_u).fill(0.0);
        let h = random_h(4, 3, 9);
        let out = gat_layer(&h, &store, &p.layers[0], 0.2, &path_edges(4), None).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn all_zero_params_leave_features_unchanged() {
        let (mut store, p) = setup(3, 3, 1);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let h = random_h(5, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, a) = gnn_forward(&h, &store, &p, &path_edges(5), Mode::Eval, &mut rng).unwrap();
        assert_eq!(out, h);
        assert_eq!(a.values.len(), path_edges(5).len());
    }

    #[test]
    fn single_layer_stack_equals_layer() {
        let (store, p) = setup(3, 1, 4);
        let h = random_h(5, 3, 9);
        let edges = path_edges(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (stack, _) = gnn_forward(&h, &store, &p, &edges, Mode::Eval, &mut rng).unwrap();
        assert_eq!(stack, gat_layer(&h, &store, &p.layers[0], 0.2, &edges, None).unwrap());
        let (again, _) = gnn_forward(&h, &store, &p, &edges, Mode::Eval, &mut rng).unwrap();
        assert_eq!(stack, again);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (store, p) = setup(3, 1, 4);
        assert!(gat_layer(&random_h(5, 4, 1), &store, &p.layers[0], 0.2, &path_edges(5), None).is_err());
        assert!(gat_layer(&random_h(4, 3, 1), &store, &p.layers[0], 0.2, &path_edges(5), None).is_err());
    }

    #[test]
    fn gat_layer_gradients_match_finite_differences() {
        // 4-node graph, d = 3
        let (store, p) = setup(3, 1, 21);
        let edges = Arc::new(EdgeIndex::from_pairs(
            4,
            [
                (0, 1),
                (1, 0),
                (0, 2),
                (2, 0),
                (2, 3),
                (3, 2),
                (0, 0),
                (1, 1),
                (2, 2),
                (3, 3),
            ],
        ));
        let h = random_h(4, 3, 22);
        let weights = random_h(4, 3, 23);
        let layer = p.layers[0];
        let loss = |tape: &mut Tape<'_>, hv: Var| -> Result<Var> {
            let (out, _) = gat_layer_on_tape(tape, hv, &layer, 0.2, &edges, None)?;
            let w = tape.leaf(weights.clone());
            let prod = tape.mul(out, w);
            Ok(tape.sum(prod))
        };
        let by_params = gradcheck::check_params(&store, &[layer.w_a, layer.b_vec, layer.w_u], &[], 1e-6, |_, tape| {
            let hv = tape.leaf(h.clone());
            loss(tape, hv)
        })
        .unwrap();
        assert!(by_params.max_rel_err <= 1e-4, "{by_params:?}");

        let by_input = gradcheck::check_inputs(std::slice::from_ref(&h), 1e-6, |tape, v| {
            // rebuild with the detached tape: parameters captured as leaves
            let w_a = tape.leaf(store.get(layer.w_a).clone());
            let b = tape.leaf(store.get(layer.b_vec).clone());
            let w_u = tape.leaf(store.get(layer.w_u).clone());
            let top = tape.slice_rows(w_a, 0, 3);
            let bot = tape.slice_rows(w_a, 3, 3);
            let pp = tape.matmul(v[0], top);
            let qq = tape.matmul(v[0], bot);
            let e = tape.edge_scores(pp, qq, b, 0.2, edges.clone());
            let a = tape.segment_softmax(e, edges.clone());
            let m = tape.matmul(v[0], w_u);
            let agg = tape.edge_aggregate(a, m, edges.clone());
            let act = tape.relu(agg);
            let out = tape.add(act, v[0]);
            let w = tape.leaf(weights.clone());
            let prod = tape.mul(out, w);
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert!(by_input.max_rel_err <= 1e-4, "{by_input:?}");
    }

    proptest! {
        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..200, n in 2usize..9) {
            let (store, p) = setup(4, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            for i in 1..n {
                let j = rng.gen_range(0..i);
                pairs.push((i, j));
                pairs.push((j, i));
            }
            let edges = Arc::new(EdgeIndex::from_pairs(n, pairs));
            let h = random_h(n, 4, seed + 2) * 3.0;
            let a = attention_coefficients(&h, &store, &p.layers[0], 0.2, &edges).unwrap();
            for s in a.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            prop_assert!(a.values.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..100) {
            let n = 5;
            let (store, p) = setup(3, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perm = {
                let mut v: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
                v
            };
            let base: Vec<(usize, usize)> = vec![(0, 1), (1, 2), (1, 3), (3, 4)];
            let mk = |map: &dyn Fn(usize) -> usize| {
                let pairs = base
                    .iter()
                    .flat_map(|&(a, b)| [(map(a), map(b)), (map(b), map(a))])
                    .chain((0..n).map(|i| (i, i)));
                Arc::new(EdgeIndex::from_pairs(n, pairs))
            };
            let h = random_h(n, 3, seed + 7);
            let mut hp = Mat::zeros((n, 3));
            for i in 0..n {
                hp.row_mut(perm[i]).assign(&h.row(i));
            }
            let (out, _) = gnn_forward(&h, &store, &p, &mk(&|i| i), Mode::Eval, &mut rng).unwrap();
            let (outp, _) = gnn_forward(&hp, &store, &p, &mk(&|i| perm[i]), Mode::Eval, &mut rng).unwrap();
            for i in 0..n {
                for c in 0..3 {
                    prop_assert!((out[[i, c]] - outp[[perm[i], c]]).abs() < 1e-12);
                }
            }
        }
    }
}
