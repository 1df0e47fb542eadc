//! Weighted top-K node sampling with Gumbel keys, its softmax relaxation,
//! connectivity repair, and counterfactual complements.
//!
//! Each node gets key `r̂_i = ln w_i + g_i` with `g_i ~ Gumbel(0, 1)`; the K
//! largest keys form a K-hot selection whose ordered prefix is distributed as
//! sequential sampling without replacement proportional to `w`. The relaxed
//! mask replays the same keys through K tempered softmax rounds, each round
//! damping the logits by `ln(1 − a)` of the mass it just allocated.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::AttentionMatrix;
use crate::graph::EventGraph;

pub const DEFAULT_WEIGHT_EPS: f64 = 1e-6;

/// Floor inside `ln(1 − a)` so a fully allocated node is masked, not `-inf`.
const RELAX_LOG_FLOOR: f64 = 1e-300;

/// Strictly positive per-node sampling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeWeights(Vec<f64>);

impl NodeWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::out_of_range("node weight", bad));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn log(&self) -> Vec<f64> {
        self.0.iter().map(|w| w.ln()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Subgraph size ratio, `K = ⌈kappa · n⌉`.
    pub kappa: f64,
    /// Evidence subgraphs per event.
    pub m: usize,
    pub temperature: f64,
    pub weight_eps: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kappa: 0.3,
            m: 4,
            temperature: 1.0,
            weight_eps: DEFAULT_WEIGHT_EPS,
        }
    }
}

impl SamplerConfig {
    pub fn subgraph_size(&self, n: usize) -> Result<usize> {
        let k = (self.kappa * n as f64 - 1e-9).ceil().max(0.0) as usize;
        if k < 1 || k > n {
            return Err(Error::out_of_range(format!("K for n = {n}"), k));
        }
        Ok(k)
    }
}

/// Per-node weight = attention received (column sum) + eps.
pub fn node_weights(attention: &AttentionMatrix, eps: f64) -> NodeWeights {
    let mut w = vec![eps; attention.edges.n];
    for (k, &a) in attention.values.iter().enumerate() {
        w[attention.edges.neighbor[k]] += a;
    }
    NodeWeights(w)
}

/// Tape version of [`node_weights`] on a `[1 × E]` attention row.
pub fn node_weights_on_tape(
    tape: &mut Tape<'_>,
    attention: Var,
    edges: &std::sync::Arc<crate::autodiff::EdgeIndex>,
    eps: f64,
) -> Var {
    let col = tape.edge_column_sum(attention, edges.clone());
    tape.add_scalar(col, eps)
}

/// Standard Gumbel draws `−ln(−ln u)`, `u ~ U(0,1)`.
pub fn gumbel_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = loop {
                let u = rng.gen::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

/// Keys `ln w_i + g_i` for explicit noise (test hook).
pub fn gumbel_keys_with_noise(w: &NodeWeights, noise: &[f64]) -> Vec<f64> {
    w.0.iter().zip(noise).map(|(w, g)| w.ln() + g).collect()
}

pub fn gumbel_keys<R: Rng>(w: &NodeWeights, rng: &mut R) -> Vec<f64> {
    gumbel_keys_with_noise(w, &gumbel_noise(w.len(), rng))
}

/// Indices of the K largest keys, largest first; ties go to the smaller index.
pub fn top_k_indices(keys: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > keys.len() {
        return Err(Error::out_of_range("K", k));
    }
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn k_hot(n: usize, selected: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; n];
    for &i in selected {
        c[i] = 1.0;
    }
    c
}

/// Weighted top-K node sampling: returns a K-hot vector.
pub fn top_k_sample<R: Rng>(w: &NodeWeights, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let keys = gumbel_keys(w, rng);
    Ok(k_hot(w.len(), &top_k_indices(&keys, k)?))
}

/// Probability of drawing the ordered sequence `seq` when sampling without
/// replacement proportionally to `w`.
pub fn sequence_probability(w: &[f64], seq: &[usize]) -> Result<f64> {
    let mut seen = BTreeSet::new();
    let total: f64 = w.iter().sum();
    let mut remaining = total;
    let mut p = 1.0;
    for &i in seq {
        if i >= w.len() {
            return Err(Error::out_of_range("sequence index", i));
        }
        if !seen.insert(i) {
            return Err(Error::RepeatedIndex(i));
        }
        p *= w[i] / remaining;
        remaining -= w[i];
    }
    Ok(p)
}

/// Relaxed K-hot mask on the tape: K tempered softmax rounds over the
/// `[1 × n]` keys, each round adding `ln(1 − a)` of its own allocation.
pub fn relaxed_topk_on_tape(tape: &mut Tape<'_>, keys: Var, k: usize, temperature: f64) -> Result<Var> {
    let (rows, n) = tape.shape(keys);
    if rows != 1 {
        return Err(Error::Shape(format!("keys must be a row, got {rows} rows")));
    }
    if k < 1 || k > n {
        return Err(Error::out_of_range("K", k));
    }
    if !(temperature > 0.0) {
        return Err(Error::out_of_range("temperature", temperature));
    }
    let mut logits = keys;
    let mut mask: Option<Var> = None;
    for round in 0..k {
        let scaled = tape.scale(logits, 1.0 / temperature);
        let a = tape.softmax_rows(scaled);
        mask = Some(match mask {
            None => a,
            Some(m) => tape.add(m, a),
        });
        if round + 1 < k {
            let neg = tape.scale(a, -1.0);
            let remaining = tape.add_scalar(neg, 1.0);
            let damp = tape.ln_floor(remaining, RELAX_LOG_FLOOR);
            logits = tape.add(logits, damp);
        }
    }
    Ok(mask.expect("k >= 1"))
}

/// Relaxed mask for explicit keys.
pub fn relaxed_topk_from_keys(keys: &[f64], k: usize, temperature: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::detached();
    let kv = tape.row_vector(keys);
    let m = relaxed_topk_on_tape(&mut tape, kv, k, temperature)?;
    Ok(tape.value(m).iter().copied().collect())
}

pub fn relaxed_topk<R: Rng>(w: &NodeWeights, k: usize, temperature: f64, rng: &mut R) -> Result<Vec<f64>> {
    relaxed_topk_from_keys(&gumbel_keys(w, rng), k, temperature)
}

/// Make a selection connected: keep the component (within the selection)
/// of its highest-weight node, then grow greedily by the highest-weight
/// frontier node until `k` nodes are held. Ties go to the smaller id.
pub fn connect_repair(adjacency: &[Vec<usize>], selected: &[usize], w: &[f64], k: usize) -> Vec<usize> {
    let n = adjacency.len();
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let better = |a: usize, b: usize| w[a] > w[b] || (w[a] == w[b] && a < b);
    let Some(&seed) = chosen.iter().reduce(|best, x| if better(*x, *best) { x } else { best }) else {
        return Vec::new();
    };

    let mut kept = vec![false; n];
    kept[seed] = true;
    let mut stack = vec![seed];
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adjacency[u] {
            if chosen.contains(&v) && !kept[v] {
                kept[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    while count < k {
        let next = (0..n)
            .filter(|&v| !kept[v] && adjacency[v].iter().any(|&u| kept[u]))
            .reduce(|best, v| if better(v, best) { v } else { best });
        match next {
            Some(v) => {
                kept[v] = true;
                count += 1;
            }
            None => break,
        }
    }
    (0..n).filter(|&v| kept[v]).collect()
}

/// `(V ∖ subgraph) ∪ {source}` restricted to the source's connected
/// component. When the subgraph covers every non-source node, the
/// complement is the source plus its earliest-posted neighbour.
pub fn complement(event: &EventGraph, adjacency: &[Vec<usize>], subgraph: &[usize]) -> Vec<usize> {
    let n = event.n();
    let src = event.source();
    let mut allowed = vec![true; n];
    for &v in subgraph {
        allowed[v] = false;
    }
    allowed[src] = true;
    if (0..n).all(|v| v == src || !allowed[v]) {
        let posts = event.posts();
        let nearest = adjacency[src].iter().copied().min_by(|&a, &b| {
            posts[a]
                .time_offset_min
                .total_cmp(&posts[b].time_offset_min)
                .then(a.cmp(&b))
        });
        let mut out = vec![src];
        out.extend(nearest);
        out.sort_unstable();
        return out;
    }
    let mut kept = vec![false; n];
    kept[src] = true;
    let mut stack = vec![src];
    while let Some(u) = stack.pop() {
        for &v in &adjacency[u] {
            if allowed[v] && !kept[v] {
                kept[v] = true;
                stack.push(v);
            }
        }
    }
    (0..n).filter(|&v| kept[v]).collect()
}

pub fn is_connected(adjacency: &[Vec<usize>], nodes: &[usize]) -> bool {
    let Some(&start) = nodes.first() else {
        return true;
    };
    let set: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(u) = stack.pop() {
        for &v in &adjacency[u] {
            if set.contains(&v) && seen.insert(v) {
                stack.push(v);
            }
        }
    }
    seen.len() == set.len()
}

/// One sampling round: hard keys, repaired subgraph and complement.
#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub noise: Vec<f64>,
    pub top_k: Vec<usize>,
    pub subgraph: Vec<usize>,
    pub complement: Vec<usize>,
}

pub fn hard_round(event: &EventGraph, adjacency: &[Vec<usize>], w: &[f64], k: usize, noise: Vec<f64>) -> Result<Round> {
    if noise.len() != w.len() || w.len() != event.n() {
        return Err(Error::Shape(format!(
            "{} weights, {} noise values for {} nodes",
            w.len(),
            noise.len(),
            event.n()
        )));
    }
    let keys: Vec<f64> = w.iter().zip(&noise).map(|(w, g)| w.ln() + g).collect();
    let top_k = top_k_indices(&keys, k)?;
    let subgraph = connect_repair(adjacency, &top_k, w, k);
    let complement = complement(event, adjacency, &subgraph);
    Ok(Round {
        noise,
        top_k,
        subgraph,
        complement,
    })
}

/// The m evidence subgraphs of an event with their complements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub subgraphs: Vec<Vec<usize>>,
    pub complements: Vec<Vec<usize>>,
    pub soft_masks: Vec<Vec<f64>>,
}

/// Where Gumbel noise comes from.
pub enum Noise<'a, R: Rng> {
    Draw(&'a mut R),
    /// One noise vector per round.
    Fixed(&'a [Vec<f64>]),
}

impl<R: Rng> Noise<'_, R> {
    pub fn round(&mut self, round: usize, n: usize) -> Result<Vec<f64>> {
        match self {
            Noise::Draw(rng) => Ok(gumbel_noise(n, *rng)),
            Noise::Fixed(all) => all
                .get(round)
                .cloned()
                .ok_or_else(|| Error::Shape(format!("no injected noise for round {round}"))),
        }
    }
}

/// Sample m rounds from attention-derived weights.
pub fn build_evidence<R: Rng>(
    event: &EventGraph,
    attention: &AttentionMatrix,
    cfg: &SamplerConfig,
    mut noise: Noise<'_, R>,
) -> Result<EvidenceSet> {
    if event.n() < 2 {
        return Err(Error::out_of_range("event size", event.n()));
    }
    let k = cfg.subgraph_size(event.n())?;
    let w = node_weights(attention, cfg.weight_eps);
    let adjacency = event.adjacency();
    let mut out = EvidenceSet {
        subgraphs: Vec::with_capacity(cfg.m),
        complements: Vec::with_capacity(cfg.m),
        soft_masks: Vec::with_capacity(cfg.m),
    };
    for r in 0..cfg.m {
        let g = noise.round(r, event.n())?;
        let round = hard_round(event, &adjacency, w.as_slice(), k, g)?;
        let keys = gumbel_keys_with_noise(&w, &round.noise);
        out.soft_masks.push(relaxed_topk_from_keys(&keys, k, cfg.temperature)?);
        out.subgraphs.push(round.subgraph);
        out.complements.push(round.complement);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::EdgeIndex;
    use crate::gradcheck;
    use crate::graph::fixtures;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn uniform_two_clique_gives_equal_weights() {
        let edges = Arc::new(EdgeIndex::from_pairs(2, [(0, 0), (0, 1), (1, 0), (1, 1)]));
        let att = AttentionMatrix {
            edges,
            values: vec![0.5; 4],
        };
        let w = node_weights(&att, 1e-6);
        assert_eq!(w.as_slice()[0], w.as_slice()[1]);
    }

    #[test]
    fn node_receiving_no_attention_gets_eps() {
        let edges = Arc::new(EdgeIndex::from_pairs(3, [(0, 0), (1, 0), (2, 0)]));
        let att = AttentionMatrix {
            edges,
            values: vec![1.0; 3],
        };
        let w = node_weights(&att, 1e-6);
        assert_eq!(w.as_slice(), &[3.0 + 1e-6, 1e-6, 1e-6]);
        assert!(NodeWeights::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_noise_keys_are_log_weights() {
        let w = NodeWeights::new(vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(gumbel_keys_with_noise(&w, &[0.0; 4]), w.log());
        let keys = gumbel_keys_with_noise(&w, &[0.0; 4]);
        let mut top = top_k_indices(&keys, 2).unwrap();
        top.sort_unstable();
        assert_eq!(top, vec![0, 1]);
    }

    #[test]
    fn k_equal_n_selects_everything() {
        let w = NodeWeights::new(vec![1.0, 5.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(top_k_sample(&w, 3, &mut rng).unwrap(), vec![1.0; 3]);
        assert!(top_k_sample(&w, 0, &mut rng).is_err());
        assert!(top_k_sample(&w, 4, &mut rng).is_err());
    }

    #[test]
    fn uniform_pairs_are_equally_likely() {
        let w = NodeWeights::new(vec![1.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = std::collections::HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let c = top_k_sample(&w, 2, &mut rng).unwrap();
            let pair: Vec<usize> = (0..4).filter(|&i| c[i] == 1.0).collect();
            *counts.entry(pair).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn sequence_probability_cases() {
        assert_eq!(sequence_probability(&[1.0, 1.0], &[0]).unwrap(), 0.5);
        assert!((sequence_probability(&[2.0, 1.0, 1.0], &[0, 1]).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(
            sequence_probability(&[1.0, 1.0], &[0, 0]),
            Err(Error::RepeatedIndex(0))
        ));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn full_length_sequences_sum_to_one() {
        for w in [
            vec![1.0, 2.0],
            vec![2.0, 1.0, 1.0],
            vec![0.3, 1.7, 2.2, 0.1],
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
        ] {
            let total: f64 = permutations(w.len())
                .iter()
                .map(|s| sequence_probability(&w, s).unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_mask_limits() {
        let keys = [0.3, 2.0, -1.0, 1.2, 0.9];
        let hard = k_hot(5, &top_k_indices(&keys, 2).unwrap());
        let soft = relaxed_topk_from_keys(&keys, 2, 1e-6).unwrap();
        for (h, s) in hard.iter().zip(&soft) {
            assert!((h - s).abs() <= 1e-6);
        }
        for t in [0.1, 1.0, 5.0] {
            let soft = relaxed_topk_from_keys(&keys, 3, t).unwrap();
            assert!((soft.iter().sum::<f64>() - 3.0).abs() < 1e-9);
            assert!(soft.iter().all(|&v| v >= 0.0));
        }
        assert!(relaxed_topk_from_keys(&keys, 2, 0.0).is_err());
    }

    #[test]
    fn relaxed_mask_gradient_wrt_log_weights() {
        let logw = Mat::from_shape_vec((1, 5), vec![-0.3, 0.4, -1.1, 0.2, 0.05]).unwrap();
        let noise = Mat::from_shape_vec((1, 5), vec![0.1, -0.4, 0.9, 0.0, 0.3]).unwrap();
        let probe = Mat::from_shape_vec((1, 5), vec![1.0, -2.0, 0.5, 3.0, -1.0]).unwrap();
        let r = gradcheck::check_inputs(&[logw], 1e-6, |tape, v| {
            let g = tape.leaf(noise.clone());
            let keys = tape.add(v[0], g);
            let m = relaxed_topk_on_tape(tape, keys, 2, 0.7)?;
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(m, p);
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    use crate::params::Mat;

    fn path(n: usize) -> EventGraph {
        fixtures::chain("path", n)
    }

    #[test]
    fn repair_keeps_connected_selection() {
        let g = path(5);
        let adj = g.adjacency();
        let w = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(connect_repair(&adj, &[1, 2, 3], &w, 3), vec![1, 2, 3]);
    }

    #[test]
    fn repair_on_path_follows_greedy_rule() {
        // a–b–c, select {a, c} with w_a > w_c: keep a, add its only frontier node b
        let g = path(3);
        let adj = g.adjacency();
        assert_eq!(connect_repair(&adj, &[0, 2], &[3.0, 1.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn complement_rules() {
        let g = path(4);
        let adj = g.adjacency();
        // subgraph without source
        assert_eq!(complement(&g, &adj, &[2, 3]), vec![0, 1]);
        // subgraph containing source: source still present
        let c = complement(&g, &adj, &[0, 1]);
        assert!(c.contains(&0));
        assert_eq!(c, vec![0]);
        // covering every non-source node
        assert_eq!(complement(&g, &adj, &[1, 2, 3]), vec![0, 1]);
        // K = n − 1 excluding the source
        let star = {
            let posts = (0..4u64)
                .map(|i| fixtures::post(i, (i > 0).then_some(0), i as f64, "x"))
                .collect();
            crate::graph::validate_event(&fixtures::record("star", 0, posts)).unwrap()
        };
        let sadj = star.adjacency();
        assert_eq!(complement(&star, &sadj, &[1, 2]), vec![0, 3]);
    }

    #[test]
    fn evidence_set_invariants() {
        let g = fixtures::chain("ev", 9);
        let edges = g.message_edges();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = {
            let raw: Vec<f64> = (0..edges.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
            let mut v = raw.clone();
            for i in 0..edges.n {
                let s: f64 = edges.edges_of(i).map(|k| raw[k]).sum();
                for k in edges.edges_of(i) {
                    v[k] = raw[k] / s;
                }
            }
            v
        };
        let att = AttentionMatrix { edges, values };
        let cfg = SamplerConfig {
            m: 3,
            kappa: 0.4,
            ..Default::default()
        };
        let ev = build_evidence(&g, &att, &cfg, Noise::Draw(&mut rng)).unwrap();
        let adj = g.adjacency();
        assert_eq!(ev.subgraphs.len(), 3);
        assert_eq!(ev.complements.len(), 3);
        for (s, c) in ev.subgraphs.iter().zip(&ev.complements) {
            assert_eq!(s.len(), 4);
            assert!(is_connected(&adj, s));
            assert!(is_connected(&adj, c));
            assert!(c.contains(&g.source()));
        }
        for m in &ev.soft_masks {
            assert!((m.iter().sum::<f64>() - 4.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn repair_output_is_connected_with_size_k(seed in 0u64..500, n in 2usize..12, kfrac in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let posts = (0..n as u64)
                .map(|i| fixtures::post(i, (i > 0).then(|| rng.gen_range(0..i)), i as f64, "x"))
                .collect();
            let g = crate::graph::validate_event(&fixtures::record("r", 0, posts)).unwrap();
            let adj = g.adjacency();
            let k = ((kfrac * n as f64).ceil() as usize).clamp(1, n);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..2.0)).collect();
            let keys = gumbel_keys(&NodeWeights::new(w.clone()).unwrap(), &mut rng);
            let sel = top_k_indices(&keys, k).unwrap();
            let out = connect_repair(&adj, &sel, &w, k);
            prop_assert_eq!(out.len(), k);
            prop_assert!(is_connected(&adj, &out));
            let comp = complement(&g, &adj, &out);
            prop_assert!(comp.contains(&g.source()));
            prop_assert!(is_connected(&adj, &comp));
        }

        #[test]
        fn straight_through_pairing(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 7;
            let w = NodeWeights::new((0..n).map(|_| rng.gen_range(0.05..3.0)).collect()).unwrap();
            let keys = gumbel_keys(&w, &mut rng);
            let hard = top_k_indices(&keys, 3).unwrap();
            let soft = relaxed_topk_from_keys(&keys, 3, 1e-4).unwrap();
            let soft_top = top_k_indices(&soft, 3).unwrap();
            let (mut a, mut b) = (hard.clone(), soft_top);
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
