//! Event graphs: posts, reply/retweet structure, JSONL ingestion and the
//! per-event transforms used by the experiments (fold splits, detection
//! deadlines, perturbation).

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::EdgeIndex;
use crate::error::{Error, Result};
use crate::params::Mat;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Source,
    Reply,
    Retweet,
}

/// One post as it appears in the JSONL format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub text: String,
    pub time_offset_min: f64,
    pub relation: Relation,
}

/// Raw event record, one JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub label: u8,
    pub posts: Vec<Post>,
    /// Optional edges beyond the reply/retweet tree, as `[from_id, to_id]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_edges: Vec<(u64, u64)>,
}

/// Veracity label: 0 = false rumor, 1 = true rumor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    False = 0,
    True = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::False),
            1 => Some(Label::True),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn opposite(self) -> Self {
        match self {
            Label::False => Label::True,
            Label::True => Label::False,
        }
    }
}

/// A validated event. Node `i` is `posts[i]`; `edges` run parent → responder.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGraph {
    event_id: String,
    posts: Vec<Post>,
    edges: Vec<(usize, usize)>,
    extra_edges: Vec<(usize, usize)>,
    label: Label,
    source: usize,
}

impl EventGraph {
    pub fn event_id(&self) -> &str {
        &self.event_id
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    /// Reply/retweet edges, parent → responder.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Non-tree edges (may be empty).
    pub fn extra_edges(&self) -> &[(usize, usize)] {
        &self.extra_edges
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn n(&self) -> usize {
        self.posts.len()
    }

    /// Events reduced below two posts (only possible after deadline filtering).
    pub fn is_below_minimum(&self) -> bool {
        self.posts.len() < 2
    }

    /// Sorted undirected neighbour lists of the skeleton (tree plus extra edges).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.n()];
        for &(a, b) in self.edges.iter().chain(&self.extra_edges) {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Message-passing neighbourhoods: symmetrised skeleton plus a self-loop per node.
    pub fn message_edges(&self) -> Arc<EdgeIndex> {
        let pairs = self
            .edges
            .iter()
            .chain(&self.extra_edges)
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .chain((0..self.n()).map(|i| (i, i)));
        Arc::new(EdgeIndex::from_pairs(self.n(), pairs))
    }

    pub fn to_record(&self) -> EventRecord {
        EventRecord {
            event_id: self.event_id.clone(),
            label: self.label.as_u8(),
            posts: self.posts.clone(),
            extra_edges: self
                .extra_edges
                .iter()
                .map(|&(a, b)| (self.posts[a].id, self.posts[b].id))
                .collect(),
        }
    }

    pub fn max_time_offset(&self) -> f64 {
        self.posts.iter().map(|p| p.time_offset_min).fold(0.0, f64::max)
    }
}

/// Check every structural invariant of a raw record and build the graph.
pub fn validate_event(record: &EventRecord) -> Result<EventGraph> {
    let event = build_event(record)?;
    if event.n() < 2 {
        return Err(Error::invalid(
            &record.event_id,
            format!("event has {} post(s); at least 2 are required", event.n()),
        ));
    }
    Ok(event)
}

/// All invariants except the minimum size.
fn build_event(record: &EventRecord) -> Result<EventGraph> {
    let eid = record.event_id.as_str();
    let label = Label::from_u8(record.label)
        .ok_or_else(|| Error::invalid(eid, format!("label {} is not 0 or 1", record.label)))?;
    if record.posts.is_empty() {
        return Err(Error::invalid(eid, "event has no posts"));
    }
    let mut index: HashMap<u64, usize> = HashMap::with_capacity(record.posts.len());
    for (i, p) in record.posts.iter().enumerate() {
        if index.insert(p.id, i).is_some() {
            return Err(Error::invalid(eid, format!("duplicate post id {}", p.id)));
        }
        if !(p.time_offset_min.is_finite() && p.time_offset_min >= 0.0) {
            return Err(Error::invalid(
                eid,
                format!("post {} has invalid time offset {}", p.id, p.time_offset_min),
            ));
        }
    }

    let mut source = None;
    let mut edges = Vec::with_capacity(record.posts.len().saturating_sub(1));
    for (i, p) in record.posts.iter().enumerate() {
        match (p.parent_id, p.relation) {
            (None, Relation::Source) => {
                if source.replace(i).is_some() {
                    return Err(Error::invalid(eid, "multiple sources"));
                }
                if p.time_offset_min != 0.0 {
                    return Err(Error::invalid(
                        eid,
                        format!("source post {} must have time offset 0", p.id),
                    ));
                }
            }
            (None, _) => {
                return Err(Error::invalid(
                    eid,
                    format!("post {} has no parent but is not the source", p.id),
                ))
            }
            (Some(_), Relation::Source) => {
                return Err(Error::invalid(
                    eid,
                    format!("post {} is marked source but has a parent", p.id),
                ))
            }
            (Some(parent), _) => {
                if parent == p.id {
                    return Err(Error::invalid(eid, format!("post {} replies to itself", p.id)));
                }
                let &pi = index
                    .get(&parent)
                    .ok_or_else(|| Error::invalid(eid, format!("post {} has dangling parent {}", p.id, parent)))?;
                if record.posts[pi].time_offset_min > p.time_offset_min {
                    return Err(Error::invalid(
                        eid,
                        format!("post {} is earlier than its parent {}", p.id, parent),
                    ));
                }
                edges.push((pi, i));
            }
        }
    }
    let source = source.ok_or_else(|| Error::invalid(eid, "no source post"))?;

    // Every post must be reachable from the source along parent links;
    // an unreachable post sits on (or below) a parent cycle.
    let n = record.posts.len();
    let mut children = vec![Vec::new(); n];
    for &(a, b) in &edges {
        children[a].push(b);
    }
    let mut seen = vec![false; n];
    seen[source] = true;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &v in &children[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(bad) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(
            eid,
            format!(
                "post {} is not connected to the source (cycle in parent links)",
                record.posts[bad].id
            ),
        ));
    }

    let tree: HashSet<(usize, usize)> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let mut extra = BTreeSet::new();
    for &(a, b) in &record.extra_edges {
        let (&ai, &bi) = match (index.get(&a), index.get(&b)) {
            (Some(ai), Some(bi)) => (ai, bi),
            _ => {
                return Err(Error::invalid(
                    eid,
                    format!("extra edge ({a}, {b}) references a missing post"),
                ))
            }
        };
        if ai == bi {
            return Err(Error::invalid(eid, format!("extra edge ({a}, {b}) is a self-loop")));
        }
        if !tree.contains(&(ai, bi)) {
            extra.insert((ai, bi));
        }
    }

    Ok(EventGraph {
        event_id: record.event_id.clone(),
        posts: record.posts.clone(),
        edges,
        extra_edges: extra.into_iter().collect(),
        label,
        source,
    })
}

/// A named collection of events with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub vocab_bits: u32,
    events: Vec<EventGraph>,
}

pub const DEFAULT_VOCAB_BITS: u32 = 16;

impl Dataset {
    pub fn new(name: impl Into<String>, vocab_bits: u32, events: Vec<EventGraph>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(events.len());
        for e in &events {
            if !ids.insert(e.event_id()) {
                return Err(Error::DuplicateEvent(e.event_id().to_string()));
            }
        }
        Ok(Self {
            name: name.into(),
            vocab_bits,
            events,
        })
    }

    pub fn events(&self) -> &[EventGraph] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, event_id: &str) -> Option<&EventGraph> {
        self.events.iter().find(|e| e.event_id() == event_id)
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for e in &self.events {
            c[e.label().as_u8() as usize] += 1;
        }
        c
    }

    /// Serialise to JSONL (one event per line, LF endings).
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, &e.to_record()).map_err(|err| Error::Io(std::io::Error::other(err)))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Parse JSONL from a reader. Blank lines are skipped; line numbers are 1-based.
pub fn parse_events<R: BufRead>(reader: R, name: &str) -> Result<Dataset> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(validate_event(&record)?);
    }
    Dataset::new(name, DEFAULT_VOCAB_BITS, events)
}

/// Load a JSONL dataset; the dataset is named after the file stem.
pub fn load_events(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_events(BufReader::new(File::open(path)?), &name)
}

/// Event → fold index, stratified by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold of each event, aligned with `Dataset::events()`.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn fold_of_event(&self, dataset: &Dataset, event_id: &str) -> Option<usize> {
        dataset
            .events()
            .iter()
            .position(|e| e.event_id() == event_id)
            .map(|i| self.fold_of[i])
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Shuffle each class with a seeded stream, then deal the concatenated
/// class lists round-robin so both overall and per-class fold sizes differ
/// by at most one.
pub fn split_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::out_of_range("fold count", k));
    }
    if dataset.len() < k {
        return Err(Error::TooFewEvents {
            events: dataset.len(),
            folds: k,
        });
    }
    let mut rng = rng::stream(seed, &[0xf01d]);
    let mut order = Vec::with_capacity(dataset.len());
    for label in [Label::False, Label::True] {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.events()[i].label() == label)
            .collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut fold_of = vec![0; dataset.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Keep only posts published at or before the deadline (source always kept).
/// The result may fall below two posts; see [`EventGraph::is_below_minimum`].
pub fn filter_by_deadline(event: &EventGraph, deadline_min: f64) -> EventGraph {
    let keep: Vec<bool> = event
        .posts
        .iter()
        .enumerate()
        .map(|(i, p)| i == event.source || p.time_offset_min <= deadline_min)
        .collect();
    if keep.iter().all(|&k| k) {
        return event.clone();
    }
    induced(event, &keep)
}

fn induced(event: &EventGraph, keep: &[bool]) -> EventGraph {
    let mut remap = vec![usize::MAX; event.n()];
    let mut posts = Vec::new();
    for (i, p) in event.posts.iter().enumerate() {
        if keep[i] {
            remap[i] = posts.len();
            posts.push(p.clone());
        }
    }
    let map_edges = |edges: &[(usize, usize)]| -> Vec<(usize, usize)> {
        edges
            .iter()
            .filter(|&&(a, b)| keep[a] && keep[b])
            .map(|&(a, b)| (remap[a], remap[b]))
            .collect()
    };
    let out = EventGraph {
        event_id: event.event_id.clone(),
        edges: map_edges(&event.edges),
        extra_edges: map_edges(&event.extra_edges),
        label: event.label,
        source: remap[event.source],
        posts,
    };
    debug_assert!(build_event(&out.to_record()).is_ok());
    out
}

/// Perturbed copy of an event for robustness experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub event: EventGraph,
    /// `[n × dim]` additive feature noise, applied at the encoder output.
    pub feature_noise: Mat,
}

/// Gaussian feature noise with standard deviation `noise_sigma` plus
/// `round(edge_rate · (n − 1))` toggles of non-tree edges. Tree edges are
/// never touched, so the skeleton stays connected.
pub fn perturb_event(event: &EventGraph, noise_sigma: f64, edge_rate: f64, dim: usize, seed: u64) -> Perturbation {
    let n = event.n();
    let mut rng = rng::event_stream(seed, &event.event_id, &[0x9e27]);
    let feature_noise = if noise_sigma > 0.0 {
        Mat::from_shape_fn((n, dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise_sigma * z
        })
    } else {
        Mat::zeros((n, dim))
    };

    let edge_rate = edge_rate.clamp(0.0, 1.0);
    let toggles = (edge_rate * n.saturating_sub(1) as f64).round() as usize;
    let tree: HashSet<(usize, usize)> = event.edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let non_tree_pairs = n * n.saturating_sub(1) / 2 - event.edges.len();
    let mut extra: BTreeSet<(usize, usize)> = event.extra_edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    if non_tree_pairs > 0 {
        for _ in 0..toggles {
            let pair = loop {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a != b && !tree.contains(&(a, b)) {
                    break (a.min(b), a.max(b));
                }
            };
            if !extra.remove(&pair) {
                extra.insert(pair);
            }
        }
    }
    let mut perturbed = event.clone();
    perturbed.extra_edges = extra.into_iter().collect();
    debug_assert!(build_event(&perturbed.to_record()).is_ok());
    Perturbation {
        event: perturbed,
        feature_noise,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn post(id: u64, parent: Option<u64>, t: f64, text: &str) -> Post {
        Post {
            id,
            parent_id: parent,
            text: text.to_string(),
            time_offset_min: t,
            relation: if parent.is_none() {
                Relation::Source
            } else {
                Relation::Reply
            },
        }
    }

    pub fn record(id: &str, label: u8, posts: Vec<Post>) -> EventRecord {
        EventRecord {
            event_id: id.into(),
            label,
            posts,
            extra_edges: vec![],
        }
    }

    pub fn chain(id: &str, n: usize) -> EventGraph {
        let posts = (0..n as u64)
            .map(|i| post(i, i.checked_sub(1), i as f64 * 10.0, &format!("post {i}")))
            .collect();
        validate_event(&record(id, 1, posts)).unwrap()
    }
}
