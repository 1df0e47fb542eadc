//! Synthetic two-class rumor datasets with a planted propagation motif.
//!
//! True-rumor events contain a reply chain `source → c₁ → … → c_L`; false-rumor
//! events instead get a burst: one reply to the source that collects the
//! other burst posts as its own replies. All other
//! posts attach bushily (to the source, or to a post at depth ≤ 2), so
//! false-rumor trees stay shallow. Planted posts draw many tokens from their
//! own class's pool; ordinary posts draw a few from the other class's pool,
//! so text alone away from the motif points the wrong way. Reply delays are
//! exponential.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate_event, Dataset, EventRecord, Post, Relation, DEFAULT_VOCAB_BITS};
use crate::rng;

/// Node-count range for one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub name: String,
    pub events_true: usize,
    pub events_false: usize,
    pub nodes_true: NodeRange,
    pub nodes_false: NodeRange,
    /// Chain length below the source in true-rumor events.
    pub motif_len: usize,
    /// Size of the false-class burst: one reply to the source plus replies to it.
    pub burst_len: usize,
    pub root_attach_prob: f64,
    pub retweet_share: f64,
    pub mean_delay_min: f64,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub common_vocab: usize,
    pub class_vocab: usize,
    /// Probability that a token of an ordinary post comes from the
    /// *other* class's pool.
    pub bias_ordinary: f64,
    /// Probability that a token of a planted post comes from the event's
    /// own class pool.
    pub bias_motif: f64,
    pub vocab_bits: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        preset("mcfake-mini").expect("built-in preset")
    }
}

pub const PRESETS: &[&str] = &["mcfake-mini", "weibo-mini", "tiny"];

/// Built-in configurations. Class sizes keep the source corpora's ratios
/// (3381:4966 and 2351:2313) at 1000 events; event sizes are scaled to ~50
/// posts.
pub fn preset(name: &str) -> Result<GenConfig> {
    let base = GenConfig {
        name: name.to_string(),
        events_true: 405,
        events_false: 595,
        nodes_true: NodeRange { min: 40, max: 64 },
        nodes_false: NodeRange { min: 36, max: 60 },
        motif_len: 8,
        burst_len: 8,
        root_attach_prob: 0.6,
        retweet_share: 0.6,
        mean_delay_min: 60.0,
        tokens_min: 4,
        tokens_max: 10,
        common_vocab: 500,
        class_vocab: 20,
        bias_ordinary: 0.03,
        bias_motif: 0.6,
        vocab_bits: DEFAULT_VOCAB_BITS,
    };
    match name {
        "mcfake-mini" => Ok(base),
        "weibo-mini" => Ok(GenConfig {
            events_true: 504,
            events_false: 496,
            nodes_true: NodeRange { min: 38, max: 62 },
            nodes_false: NodeRange { min: 38, max: 62 },
            retweet_share: 0.5,
            ..base
        }),
        "tiny" => Ok(GenConfig {
            events_true: 20,
            events_false: 20,
            nodes_true: NodeRange { min: 8, max: 14 },
            nodes_false: NodeRange { min: 8, max: 14 },
            motif_len: 4,
            burst_len: 4,
            ..base
        }),
        other => Err(Error::out_of_range(
            format!("preset (known: {})", PRESETS.join(", ")),
            other,
        )),
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, r) in [("nodes_true", self.nodes_true), ("nodes_false", self.nodes_false)] {
            if r.min < 2 || r.max < r.min {
                return Err(Error::out_of_range(what, format!("{}..={}", r.min, r.max)));
            }
        }
        if self.motif_len >= self.nodes_true.min {
            return Err(Error::InfeasibleMotif {
                motif: self.motif_len,
                nodes: self.nodes_true.min,
            });
        }
        if self.burst_len >= self.nodes_false.min {
            return Err(Error::InfeasibleMotif {
                motif: self.burst_len,
                nodes: self.nodes_false.min,
            });
        }
        for (what, p) in [
            ("root_attach_prob", self.root_attach_prob),
            ("retweet_share", self.retweet_share),
            ("bias_ordinary", self.bias_ordinary),
            ("bias_motif", self.bias_motif),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::out_of_range(what, p));
            }
        }
        if !(self.mean_delay_min > 0.0) {
            return Err(Error::out_of_range("mean_delay_min", self.mean_delay_min));
        }
        if self.tokens_min == 0 || self.tokens_max < self.tokens_min {
            return Err(Error::out_of_range(
                "tokens_min..tokens_max",
                format!("{}..{}", self.tokens_min, self.tokens_max),
            ));
        }
        if self.common_vocab == 0 || self.class_vocab == 0 {
            return Err(Error::out_of_range("vocabulary size", 0));
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut labels: Vec<u8> = std::iter::repeat_n(1, cfg.events_true)
        .chain(std::iter::repeat_n(0, cfg.events_false))
        .collect();
    labels.shuffle(&mut rng::stream(seed, &[rng::fnv1a64(b"labels")]));
    let width = labels.len().max(1).to_string().len().max(4);
    let events = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let id = format!("{}-{:0width$}", cfg.name, i);
            validate_event(&generate_event(cfg, &id, label, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.name.clone(), cfg.vocab_bits, events)
}

fn generate_event(cfg: &GenConfig, event_id: &str, label: u8, seed: u64) -> EventRecord {
    let mut rng = rng::event_stream(seed, event_id, &[]);
    let range = if label == 1 { cfg.nodes_true } else { cfg.nodes_false };
    let n = rng.gen_range(range.min..=range.max);
    let delay = Exp::new(1.0 / cfg.mean_delay_min).expect("positive rate");

    let mut parent: Vec<Option<usize>> = vec![None];
    let mut depth = vec![0usize];
    // planted posts of either class; the source itself stays ordinary
    let mut on_chain = vec![false];
    if label == 1 {
        for c in 1..=cfg.motif_len {
            parent.push(Some(c - 1));
            depth.push(c);
            on_chain.push(true);
        }
    } else {
        // a hub reply to the source, the rest of the burst replying to the hub
        for b in 0..cfg.burst_len {
            parent.push(Some(if b == 0 { 0 } else { 1 }));
            depth.push(if b == 0 { 1 } else { 2 });
            on_chain.push(true);
        }
    }
    while parent.len() < n {
        let p = if rng.gen::<f64>() < cfg.root_attach_prob {
            0
        } else {
            let shallow: Vec<usize> = (0..parent.len())
                .filter(|&v| depth[v] <= 2 && !on_chain[v] || v == 0)
                .collect();
            *shallow.choose(&mut rng).expect("source is always shallow")
        };
        parent.push(Some(p));
        depth.push(depth[p] + 1);
        on_chain.push(false);
    }

    let mut time = vec![0.0f64; n];
    for v in 1..n {
        let p = parent[v].expect("non-source");
        time[v] = time[p] + delay.sample(&mut rng);
    }

    let own = if label == 1 { "t" } else { "f" };
    let other = if label == 1 { "f" } else { "t" };
    let posts = (0..n)
        .map(|v| {
            // planted posts speak for the event's class, the rest lean weakly against it
            let (bias, class_prefix) = if on_chain[v] {
                (cfg.bias_motif, own)
            } else {
                (cfg.bias_ordinary, other)
            };
            let len = rng.gen_range(cfg.tokens_min..=cfg.tokens_max);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < bias {
                        format!("{class_prefix}{}", rng.gen_range(0..cfg.class_vocab))
                    } else {
                        format!("w{}", rng.gen_range(0..cfg.common_vocab))
                    }
                })
                .collect();
            let relation = match parent[v] {
                None => Relation::Source,
                Some(_) if rng.gen::<f64>() < cfg.retweet_share => Relation::Retweet,
                Some(_) => Relation::Reply,
            };
            Post {
                id: v as u64,
                parent_id: parent[v].map(|p| p as u64),
                text: words.join(" "),
                time_offset_min: time[v],
                relation,
            }
        })
        .collect();
    EventRecord {
        event_id: event_id.to_string(),
        label,
        posts,
        extra_edges: Vec::new(),
    }
}

/// Depth of the deepest post below the source.
pub fn tree_depth(event: &crate::graph::EventGraph) -> usize {
    let n = event.n();
    let mut depth = vec![usize::MAX; n];
    depth[event.source()] = 0;
    let mut children = vec![Vec::new(); n];
    for &(p, c) in event.edges() {
        children[p].push(c);
    }
    let mut stack = vec![event.source()];
    let mut best = 0;
    while let Some(u) = stack.pop() {
        for &c in &children[u] {
            depth[c] = depth[u] + 1;
            best = best.max(depth[c]);
            stack.push(c);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_generate_and_are_deterministic() {
        let cfg = preset("tiny").unwrap();
        let a = generate_synthetic(&cfg, 7).unwrap();
        let b = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(a.to_jsonl_string(), b.to_jsonl_string());
        assert_ne!(
            a.to_jsonl_string(),
            generate_synthetic(&cfg, 8).unwrap().to_jsonl_string()
        );
        assert_eq!(a.label_counts(), [20, 20]);
        assert!(preset("nope").is_err());
    }

    #[test]
    fn mcfake_mini_shape() {
        let d = generate_synthetic(&preset("mcfake-mini").unwrap(), 1).unwrap();
        assert_eq!(d.len(), 1000);
        let [f, t] = d.label_counts();
        assert!(((t as f64 / 1000.0) - 3381.0 / 8347.0).abs() < 0.01);
        assert_eq!(f + t, 1000);
        let mean = d.events().iter().map(|e| e.n()).sum::<usize>() as f64 / 1000.0;
        assert!((45.0..55.0).contains(&mean), "{mean}");
    }

    #[test]
    fn motif_separates_depths() {
        let cfg = preset("tiny").unwrap();
        let d = generate_synthetic(&cfg, 3).unwrap();
        for e in d.events() {
            let depth = tree_depth(e);
            if e.label().as_u8() == 1 {
                assert!(depth >= cfg.motif_len);
            } else {
                assert!(depth <= 3);
            }
        }
    }

    #[test]
    fn planted_posts_carry_the_class_tokens() {
        let cfg = preset("mcfake-mini").unwrap();
        let d = generate_synthetic(
            &GenConfig {
                events_true: 30,
                events_false: 30,
                ..cfg.clone()
            },
            5,
        )
        .unwrap();
        let share = |texts: &mut dyn Iterator<Item = &str>, prefix: char| {
            let words: Vec<&str> = texts.flat_map(|t| t.split(' ')).collect();
            words.iter().filter(|w| w.starts_with(prefix)).count() as f64 / words.len() as f64
        };
        for e in d.events() {
            let (own, other) = if e.label().as_u8() == 1 { ('t', 'f') } else { ('f', 't') };
            // ids 1..=L are the planted posts in both classes
            let planted = &e.posts()[1..=cfg.motif_len.min(cfg.burst_len)];
            let rest = &e.posts()[cfg.motif_len.max(cfg.burst_len) + 1..];
            assert!(share(&mut planted.iter().map(|p| p.text.as_str()), own) > 0.25);
            assert_eq!(share(&mut rest.iter().map(|p| p.text.as_str()), own), 0.0);
            assert!(share(&mut rest.iter().map(|p| p.text.as_str()), other) < 0.15);
            if e.label().as_u8() == 0 {
                assert_eq!(e.posts()[1].parent_id, Some(0));
                assert!(e.posts()[2..=cfg.burst_len].iter().all(|p| p.parent_id == Some(1)));
            }
        }
    }

    #[test]
    fn degenerate_configs() {
        let empty = GenConfig {
            events_true: 0,
            events_false: 0,
            ..preset("tiny").unwrap()
        };
        assert!(generate_synthetic(&empty, 0).unwrap().is_empty());
        let bad = GenConfig {
            motif_len: 8,
            ..preset("tiny").unwrap()
        };
        assert!(matches!(
            generate_synthetic(&bad, 0),
            Err(Error::InfeasibleMotif { motif: 8, nodes: 8 })
        ));
    }
}
