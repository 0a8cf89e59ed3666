//! Frozen toy transformer encoder: hash-bucket tokenizer, sinusoidal
//! positions, pre-norm bidirectional self-attention blocks, and the
//! final-layer `</s>` state as the sentence embedding.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::stable_hash;
use crate::numerics::{LayerNorm, Linear, ParamId, ParamStore, Precision, Tape, Tensor, Var};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED_TOKENS: u32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub context_length: usize,
    /// Standard deviation of the token embedding table.
    pub embed_std: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 256,
            dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            context_length: 128,
            embed_std: 1.0,
            seed: 17,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED_TOKENS as usize {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {RESERVED_TOKENS} reserved ids"
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config("backbone heads must divide a positive dim".into()));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("backbone needs at least one layer and ff_dim > 0".into()));
        }
        if self.context_length < 4 {
            return Err(Error::Config("context_length must be at least 4".into()));
        }
        Ok(())
    }
}

/// Hash-bucket vocabulary.
#[derive(Clone, Debug)]
pub struct Vocab {
    pub size: usize,
    pub max_len: usize,
}

impl Vocab {
    pub fn token_id(&self, token: &str) -> u32 {
        let buckets = self.size as u64 - RESERVED_TOKENS as u64;
        RESERVED_TOKENS + (stable_hash(token.as_bytes()) % buckets) as u32
    }

    /// Lowercases, splits on anything that is not alphanumeric, hashes each
    /// piece, and truncates to the context length.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .take(self.max_len)
            .map(|t| self.token_id(t))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    GraphToken,
    Bos,
    Text,
    Sep,
    Eos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// A precomputed embedding (the graph token) already on the tape.
    Embedded(Var),
    Token(u32),
}

/// Backbone input: one slot per position with its role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    slots: Vec<(Slot, Role)>,
}

impl TokenSequence {
    pub fn new(slots: Vec<(Slot, Role)>) -> Result<Self> {
        let bos = slots.iter().filter(|(_, r)| *r == Role::Bos).count();
        let eos = slots.iter().filter(|(_, r)| *r == Role::Eos).count();
        if bos != 1 || eos != 1 {
            return Err(Error::Contract(format!(
                "sequence needs exactly one <s> and one </s>, found {bos} and {eos}"
            )));
        }
        if slots.last().map(|(_, r)| *r) != Some(Role::Eos) {
            return Err(Error::Contract("</s> must be the last position".into()));
        }
        Ok(TokenSequence { slots })
    }

    /// `[<s>, text..., </s>]`
    pub fn text_only(tokens: &[u32], max_len: usize) -> Self {
        let keep = tokens.len().min(max_len.saturating_sub(2));
        let mut slots = Vec::with_capacity(keep + 2);
        slots.push((Slot::Token(BOS), Role::Bos));
        slots.extend(tokens[..keep].iter().map(|&t| (Slot::Token(t), Role::Text)));
        slots.push((Slot::Token(EOS), Role::Eos));
        TokenSequence { slots }
    }

    pub fn slots(&self) -> &[(Slot, Role)] {
        &self.slots
    }

    pub fn roles(&self) -> Vec<Role> {
        self.slots.iter().map(|(_, r)| *r).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn eos_position(&self) -> Option<usize> {
        self.slots.iter().position(|(_, r)| *r == Role::Eos)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    vocab: Vocab,
    token_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    positions: Tensor,
}

fn sinusoidal(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("sized above")
}

impl Backbone {
    /// Registers frozen, seeded weights under `backbone.*`.
    pub fn new(config: BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let token_embedding = store.add_normal(
            "backbone.token_embedding",
            &[config.vocab_size, d],
            config.embed_std,
            false,
            &mut rng,
        );
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("backbone.block{l}");
                Block {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d, false),
                    query: Linear::new(store, &format!("{p}.query"), d, d, false, &mut rng),
                    key: Linear::new(store, &format!("{p}.key"), d, d, false, &mut rng),
                    value: Linear::new(store, &format!("{p}.value"), d, d, false, &mut rng),
                    out: Linear::new(store, &format!("{p}.out"), d, d, false, &mut rng),
                    norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d, false),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), d, config.ff_dim, false, &mut rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), config.ff_dim, d, false, &mut rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "backbone.final_norm", d, false);
        let positions = sinusoidal(config.context_length, d);
        let vocab = Vocab {
            size: config.vocab_size,
            max_len: config.context_length,
        };
        Ok(Backbone {
            config,
            vocab,
            token_embedding,
            blocks,
            final_norm,
            positions,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn context_length(&self) -> usize {
        self.config.context_length
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.tokenize(text)
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }

    /// Mean token-embedding row over the tokens of `text` (`<unk>` if none).
    pub fn mean_token_embedding(&self, store: &ParamStore, text: &str) -> Vec<f64> {
        let table = store.value(self.token_embedding);
        let d = self.dim();
        let mut ids = self.tokenize(text);
        if ids.is_empty() {
            ids.push(UNK);
        }
        let mut acc = vec![0.0; d];
        for &id in &ids {
            for (a, v) in acc.iter_mut().zip(table.row_slice(id as usize)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= ids.len() as f64);
        acc
    }

    /// Final-layer states for every position, `[len, dim]`.
    pub fn encode_sequence(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        let len = seq.len();
        if len > self.config.context_length {
            return Err(Error::Contract(format!(
                "sequence of length {len} exceeds context length {}",
                self.config.context_length
            )));
        }
        let table = tape.param(self.token_embedding);
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for (slot, _) in seq.slots() {
            match slot {
                Slot::Token(id) => run.push(*id as usize),
                Slot::Embedded(v) => {
                    if !run.is_empty() {
                        parts.push(tape.gather_rows(table, Arc::new(std::mem::take(&mut run)))?);
                    }
                    parts.push(*v);
                }
            }
        }
        if !run.is_empty() {
            parts.push(tape.gather_rows(table, Arc::new(run))?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let d = self.dim();
        let pos = Tensor::matrix(len, d, self.positions.data()[..len * d].to_vec())?;
        let pos = tape.constant(pos);
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = self.block_forward(tape, block, x)?;
        }
        self.final_norm.forward(tape, x)
    }

    fn block_forward(&self, tape: &mut Tape, b: &Block, x: Var) -> Result<Var> {
        let d = self.dim();
        let heads = self.config.heads;
        let dh = d / heads;
        let a = b.norm_attn.forward(tape, x)?;
        let q = b.query.forward(tape, a)?;
        let k = b.key.forward(tape, a)?;
        let v = b.value.forward(tape, a)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.row_softmax(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = b.out.forward(tape, o)?;
        let x = tape.add(x, o)?;
        let f = b.norm_ff.forward(tape, x)?;
        let f = b.ff_in.forward(tape, f)?;
        let f = tape.relu(f);
        let f = b.ff_out.forward(tape, f)?;
        tape.add(x, f)
    }

    /// The `</s>` row of the final-layer states, `[1, dim]`.
    pub fn extract_joint(&self, tape: &mut Tape, states: Var, seq: &TokenSequence) -> Result<Var> {
        let eos = seq
            .eos_position()
            .ok_or_else(|| Error::Contract("sequence has no </s>".into()))?;
        tape.gather_rows(states, Arc::new(vec![eos]))
    }

    /// `[<s>, tokens, </s>]` encoded without a graph token.
    pub fn sentence_embedding_on(&self, tape: &mut Tape, text: &str) -> Result<Var> {
        let seq = TokenSequence::text_only(&self.tokenize(text), self.context_length());
        let states = self.encode_sequence(tape, &seq)?;
        self.extract_joint(tape, states, &seq)
    }

    pub fn sentence_embedding(&self, store: &ParamStore, precision: Precision, text: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store, precision);
        let z = self.sentence_embedding_on(&mut tape, text)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding];
        for b in &self.blocks {
            ids.extend([b.norm_attn.gamma, b.norm_attn.beta]);
            for l in [&b.query, &b.key, &b.value, &b.out] {
                ids.extend(l.params());
            }
            ids.extend([b.norm_ff.gamma, b.norm_ff.beta]);
            ids.extend(b.ff_in.params());
            ids.extend(b.ff_out.params());
        }
        ids.extend([self.final_norm.gamma, self.final_norm.beta]);
        ids
    }
}
