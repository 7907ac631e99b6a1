//! Caption tokenizer and a small trainable transformer encoder. The encoder
//! is pre-norm with sinusoidal positions; padded positions are masked out of
//! attention and zeroed in the output.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::nn::{embed_rows, sinusoidal, LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{ParamStore, Session};
use crate::rng::Prng;
use crate::scenegraph::{split_words, Color, Relation, Shape};
use crate::tensor::{Result, TensorError, Var};
use crate::Element;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const NULL: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<null>"];

// ── vocabulary ──

#[derive(Debug, Clone, PartialEq)]
pub enum VocabError {
    Duplicate(String),
    MissingSpecial(&'static str),
    Empty,
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::Duplicate(w) => write!(f, "duplicate vocabulary entry `{w}`"),
            VocabError::MissingSpecial(w) => write!(f, "vocabulary missing special token `{w}`"),
            VocabError::Empty => write!(f, "vocabulary file is empty"),
        }
    }
}

impl core::error::Error for VocabError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    fn build(tokens: Vec<String>) -> core::result::Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(VocabError::MissingSpecial(special));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Specials followed by every caption-grammar word, sorted.
    pub fn world() -> Self {
        let mut words: BTreeSet<&'static str> = BTreeSet::new();
        words.insert("a");
        for s in Shape::ALL {
            words.insert(s.name());
        }
        for c in Color::ALL {
            words.insert(c.name());
        }
        for r in Relation::ALL {
            for w in r.caption_words() {
                words.insert(w);
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| (*s).to_owned()).collect();
        tokens.extend(words.into_iter().map(ToOwned::to_owned));
        Self::build(tokens).expect("world vocabulary is well formed")
    }

    /// Parse the persisted format: one token per line.
    pub fn from_lines(text: &str) -> core::result::Result<Self, VocabError> {
        let tokens: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(ToOwned::to_owned).collect();
        Self::build(tokens)
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let words = split_words(caption);
        if words.is_empty() {
            return alloc::vec![NULL];
        }
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Encode, then truncate or right-pad with `<pad>` to exactly `len` ids.
    pub fn encode_padded(&self, caption: &str, len: usize) -> Vec<usize> {
        let mut ids = self.encode(caption);
        ids.truncate(len);
        ids.resize(len, PAD);
        ids
    }
}

// ── encoder ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_text: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TextEncoderConfig { vocab_size, d_text: 64, layers: 2, heads: 4, max_len: 16 }
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

pub struct TextEncoder {
    cfg: TextEncoderConfig,
    embed_path: String,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
}

/// Encoded caption: `seq` is `[len, d_text]` with padded rows zeroed, `mask`
/// is true at real tokens.
pub struct TextEncoding {
    pub seq: Var,
    pub mask: Vec<bool>,
}

impl TextEncoder {
    pub fn new(path: &str, cfg: TextEncoderConfig) -> Result<Self> {
        let d = cfg.d_text;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(&alloc::format!("{path}.l{i}.ln1"), d),
                attn: MultiHeadAttention::new(&alloc::format!("{path}.l{i}.attn"), d, d, d, cfg.heads)?,
                ln2: LayerNorm::new(&alloc::format!("{path}.l{i}.ln2"), d),
                mlp: Mlp::new(&alloc::format!("{path}.l{i}.mlp"), d, 4 * d, d),
            });
        }
        Ok(TextEncoder {
            cfg,
            embed_path: alloc::format!("{path}.embed"),
            layers,
            ln_out: LayerNorm::new(&alloc::format!("{path}.ln_out"), d),
        })
    }

    pub fn config(&self) -> TextEncoderConfig {
        self.cfg
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        store.add_normal(rng, &self.embed_path, alloc::vec![self.cfg.vocab_size, self.cfg.d_text], 0.02)?;
        for layer in &self.layers {
            layer.ln1.register(store)?;
            layer.attn.register(store, rng)?;
            layer.ln2.register(store)?;
            layer.mlp.register(store, rng)?;
        }
        self.ln_out.register(store)
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        ids: &[usize],
    ) -> Result<TextEncoding> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(TensorError::BadArgument {
                op: "textenc",
                message: alloc::format!("sequence of {} ids, limit {}", ids.len(), self.cfg.max_len),
            });
        }
        let len = ids.len();
        let d = self.cfg.d_text;
        let mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        if mask.iter().all(|&m| !m) {
            return Err(TensorError::BadArgument {
                op: "textenc",
                message: String::from("all positions padded"),
            });
        }

        let mut pos_data = Vec::with_capacity(len * d);
        for p in 0..len {
            pos_data.extend(sinusoidal(d, p as f64));
        }
        let pos = sess.constant_f64(&pos_data, alloc::vec![len, d])?;

        let table = sess.param(&self.embed_path)?;
        let emb = embed_rows(sess, table, ids)?;
        let mut x = sess.tape.add(emb, pos)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(sess, x)?;
            let a = layer.attn.forward(sess, h, h, Some(&mask))?;
            x = sess.tape.add(x, a)?;
            let h = layer.ln2.forward(sess, x)?;
            let m = layer.mlp.forward(sess, h)?;
            x = sess.tape.add(x, m)?;
        }
        x = self.ln_out.forward(sess, x)?;

        // Zero the padded rows so downstream pooling over the mask sees clean rows.
        let row_gate: Vec<f64> = mask
            .iter()
            .flat_map(|&m| core::iter::repeat(if m { 1.0 } else { 0.0 }).take(d))
            .collect();
        let gate = sess.constant_f64(&row_gate, alloc::vec![len, d])?;
        let seq = sess.tape.mul(x, gate)?;
        Ok(TextEncoding { seq, mask })
    }
}
