//! Post text → initial node features.
//!
//! Tokens are lowercased alphanumeric runs hashed with 64-bit FNV-1a
//! (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`) over their
//! UTF-8 bytes, keeping the low `vocab_bits` bits. Two backends turn token
//! ids into a `d`-wide row per post: the mean of token embeddings, or the
//! final hidden state of an LSTM cell run over the token sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::EventGraph;
use crate::params::{Mat, ParamId, ParamStore};
use crate::rng::fnv1a64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    MeanEmbed,
    Recurrent,
}

pub fn tokenize(text: &str, vocab_bits: u32) -> Vec<usize> {
    let mask = if vocab_bits >= 64 {
        u64::MAX
    } else {
        (1u64 << vocab_bits) - 1
    };
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a64(t.to_lowercase().as_bytes()) & mask) as usize)
        .collect()
}

/// LSTM weights, gates packed `[input | forget | candidate | output]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub recurrent: Option<RecurrentParams>,
    pub dim: usize,
    pub vocab_bits: u32,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        vocab_bits: u32,
        with_recurrent: bool,
        rng: &mut R,
    ) -> Self {
        let rows = 1usize << vocab_bits;
        let token_embedding = store.insert_uniform("encoder.token_embedding", rows, dim, dim, rng);
        let recurrent = with_recurrent.then(|| RecurrentParams {
            w_x: store.insert_uniform("encoder.lstm.w_x", dim, 4 * dim, dim, rng),
            w_h: store.insert_uniform("encoder.lstm.w_h", dim, 4 * dim, dim, rng),
            bias: store.insert("encoder.lstm.bias", Mat::zeros((1, 4 * dim))),
        });
        Self {
            token_embedding,
            recurrent,
            dim,
            vocab_bits,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let table = store.get(self.token_embedding);
        if table.ncols() != self.dim || table.nrows() != 1usize << self.vocab_bits {
            return Err(Error::Shape(format!(
                "token embedding is {:?}, expected [{} x {}]",
                table.dim(),
                1usize << self.vocab_bits,
                self.dim
            )));
        }
        if let Some(r) = &self.recurrent {
            let d = self.dim;
            for (id, shape) in [(r.w_x, (d, 4 * d)), (r.w_h, (d, 4 * d)), (r.bias, (1, 4 * d))] {
                if store.get(id).dim() != shape {
                    return Err(Error::Shape(format!(
                        "{} is {:?}, expected {:?}",
                        store.name(id),
                        store.get(id).dim(),
                        shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-node feature matrix of one event.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub matrix: Mat,
    pub event_id: String,
}

pub fn event_tokens(event: &EventGraph, vocab_bits: u32) -> Vec<Vec<usize>> {
    event.posts().iter().map(|p| tokenize(&p.text, vocab_bits)).collect()
}

/// Record the encoder on a tape; returns the `[n × d]` feature node.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    tokens: &[Vec<usize>],
    enc: &EncoderParams,
    backend: Backend,
    noise: Option<&Mat>,
) -> Result<Var> {
    let store = tape.params();
    enc.check(store)?;
    let n = tokens.len();
    let vocab = 1usize << enc.vocab_bits;
    if let Some(bad) = tokens.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let h = match backend {
        Backend::MeanEmbed => tape.embed_mean(enc.token_embedding, tokens.to_vec()),
        Backend::Recurrent => {
            let r = enc
                .recurrent
                .ok_or_else(|| Error::Shape("recurrent backend requested without LSTM weights".into()))?;
            lstm(tape, tokens, enc, &r)
        }
    };
    match noise {
        None => Ok(h),
        Some(noise) => {
            if noise.dim() != (n, enc.dim) {
                return Err(Error::Shape(format!(
                    "feature noise is {:?}, expected [{n} x {}]",
                    noise.dim(),
                    enc.dim
                )));
            }
            let z = tape.leaf(noise.clone());
            Ok(tape.add(h, z))
        }
    }
}

/// All posts advance in lock-step; a post whose tokens are exhausted keeps its state.
fn lstm(tape: &mut Tape<'_>, tokens: &[Vec<usize>], enc: &EncoderParams, r: &RecurrentParams) -> Var {
    let n = tokens.len();
    let d = enc.dim;
    let steps = tokens.iter().map(Vec::len).max().unwrap_or(0);
    let w_x = tape.param(r.w_x);
    let w_h = tape.param(r.w_h);
    let bias = tape.param(r.bias);
    let mut h = tape.leaf(Mat::zeros((n, d)));
    let mut c = tape.leaf(Mat::zeros((n, d)));
    for t in 0..steps {
        let ids: Vec<Option<usize>> = tokens.iter().map(|toks| toks.get(t).copied()).collect();
        let active = Mat::from_shape_fn((n, d), |(i, _)| ids[i].is_some() as u8 as f64);
        let x = tape.embed_rows(enc.token_embedding, ids);
        let xw = tape.matmul(x, w_x);
        let hw = tape.matmul(h, w_h);
        let pre = tape.add(xw, hw);
        let pre = tape.add_row(pre, bias);
        let i_pre = tape.slice_cols(pre, 0, d);
        let f_pre = tape.slice_cols(pre, d, d);
        let g_pre = tape.slice_cols(pre, 2 * d, d);
        let o_pre = tape.slice_cols(pre, 3 * d, d);
        let i_gate = tape.sigmoid(i_pre);
        let f_gate = tape.sigmoid(f_pre);
        let g_cand = tape.tanh(g_pre);
        let o_gate = tape.sigmoid(o_pre);
        let fc = tape.mul(f_gate, c);
        let ig = tape.mul(i_gate, g_cand);
        let c_new = tape.add(fc, ig);
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o_gate, c_act);

        let mask = tape.leaf(active);
        let dc = tape.sub(c_new, c);
        let dc = tape.mul(mask, dc);
        c = tape.add(c, dc);
        let dh = tape.sub(h_new, h);
        let dh = tape.mul(mask, dh);
        h = tape.add(h, dh);
    }
    h
}

/// Encode an event outside of training.
pub fn encode_posts(
    event: &EventGraph,
    store: &ParamStore,
    enc: &EncoderParams,
    backend: Backend,
    noise: Option<&Mat>,
) -> Result<NodeEmbeddings> {
    let tokens = event_tokens(event, enc.vocab_bits);
    let mut tape = Tape::new(store);
    let h = encode_on_tape(&mut tape, &tokens, enc, backend, noise)?;
    Ok(NodeEmbeddings {
        matrix: tape.value(h).clone(),
        event_id: event.event_id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_cases() {
        assert!(tokenize("", 16).is_empty());
        let t = tokenize("A a", 16);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], t[1]);
        assert_eq!(tokenize("hello, World!", 16), tokenize("HELLO world", 16));
        // pinned: identical on every platform
        assert_eq!(tokenize("rumor", 64), vec![fnv1a64(b"rumor") as usize]);
        assert!(tokenize("x y z", 4).iter().all(|&t| t < 16));
    }

    fn setup(recurrent: bool) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::init(&mut store, 4, 6, recurrent, &mut rng);
        (store, enc)
    }

    #[test]
    fn mean_embed_single_token_and_empty_post() {
        let (store, enc) = setup(false);
        let g = validate(&["alpha", ""]);
        let h = encode_posts(&g, &store, &enc, Backend::MeanEmbed, None).unwrap();
        let tok = tokenize("alpha", enc.vocab_bits)[0];
        assert_eq!(h.matrix.row(0), store.get(enc.token_embedding).row(tok));
        assert!(h.matrix.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_with_zero_weights_gives_zero_rows() {
        let (mut store, enc) = setup(true);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let g = validate(&["one two three", "four"]);
        let h = encode_posts(&g, &store, &enc, Backend::Recurrent, None).unwrap();
        assert!(h.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_is_added_and_shape_checked() {
        let (store, enc) = setup(false);
        let g = validate(&["a b", "c"]);
        let clean = encode_posts(&g, &store, &enc, Backend::MeanEmbed, None).unwrap();
        let noise = Mat::from_elem((2, 4), 0.25);
        let noisy = encode_posts(&g, &store, &enc, Backend::MeanEmbed, Some(&noise)).unwrap();
        assert_eq!(noisy.matrix, &clean.matrix + 0.25);
        let bad = Mat::zeros((3, 4));
        assert!(encode_posts(&g, &store, &enc, Backend::MeanEmbed, Some(&bad)).is_err());
        assert!(encode_posts(&g, &store, &enc, Backend::Recurrent, None).is_err());
    }

    fn validate(texts: &[&str]) -> EventGraph {
        let posts = texts
            .iter()
            .enumerate()
            .map(|(i, t)| fixtures::post(i as u64, (i as u64).checked_sub(1), i as f64, t))
            .collect();
        crate::graph::validate_event(&fixtures::record("enc", 0, posts)).unwrap()
    }
}
