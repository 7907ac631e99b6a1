//! Shared layer blocks: linear maps, MLPs, layer norm, dot-product attention,
//! and sinusoidal embeddings.
//!
//! Layers are path descriptors: constructing one is free and does not touch
//! the store. `register` adds freshly initialized parameters; a model loaded
//! from a checkpoint constructs the same descriptors and skips registration.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::params::{ParamStore, Session};
use crate::rng::Prng;
use crate::tensor::{Result, TensorError, Var};

/// Additive logit mask for padded keys; underflows to exactly zero weight.
pub const KEY_MASK_NEG: f64 = -1e9;

// ── helpers ──

/// Identity-index gather that only changes the shape.
pub fn reshape<E: Element>(sess: &mut Session<'_, E>, x: Var, shape: Vec<usize>) -> Result<Var> {
    let n = sess.tape.value(x).len();
    if shape.iter().product::<usize>() != n {
        return Err(TensorError::BadShape { op: "reshape", shape });
    }
    sess.tape.gather(x, (0..n).collect(), shape)
}

/// Columns `[from, to)` of a `[rows, cols]` tensor.
pub fn slice_cols<E: Element>(sess: &mut Session<'_, E>, x: Var, from: usize, to: usize) -> Result<Var> {
    let shape = sess.tape.shape(x).to_vec();
    if shape.len() != 2 || from >= to || to > shape[1] {
        return Err(TensorError::BadArgument {
            op: "slice_cols",
            message: format!("slice [{from}, {to}) of shape {shape:?}"),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut idx = Vec::with_capacity(rows * (to - from));
    for r in 0..rows {
        for c in from..to {
            idx.push(r * cols + c);
        }
    }
    sess.tape.gather(x, idx, vec![rows, to - from])
}

/// Rows `[from, to)` of a `[rows, cols]` tensor.
pub fn slice_rows<E: Element>(sess: &mut Session<'_, E>, x: Var, from: usize, to: usize) -> Result<Var> {
    let shape = sess.tape.shape(x).to_vec();
    if shape.len() != 2 || from >= to || to > shape[0] {
        return Err(TensorError::BadArgument {
            op: "slice_rows",
            message: format!("slice [{from}, {to}) of shape {shape:?}"),
        });
    }
    let cols = shape[1];
    let idx: Vec<usize> = (from * cols..to * cols).collect();
    sess.tape.gather(x, idx, vec![to - from, cols])
}

/// Rows of an embedding table selected by id; gradient scatters back.
pub fn embed_rows<E: Element>(sess: &mut Session<'_, E>, table: Var, ids: &[usize]) -> Result<Var> {
    let shape = sess.tape.shape(table).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::BadShape { op: "embed_rows", shape });
    }
    let (vocab, d) = (shape[0], shape[1]);
    let mut idx = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(TensorError::BadIndex { op: "embed_rows", index: id, bound: vocab });
        }
        for c in 0..d {
            idx.push(id * d + c);
        }
    }
    sess.tape.gather(table, idx, vec![ids.len(), d])
}

/// Mean over rows of `x: [n, d]` where `mask` is true; `[1, d]`.
/// Errors if no row is live.
pub fn masked_mean_rows<E: Element>(sess: &mut Session<'_, E>, x: Var, mask: &[bool]) -> Result<Var> {
    let shape = sess.tape.shape(x).to_vec();
    if shape.len() != 2 || mask.len() != shape[0] {
        return Err(TensorError::BadArgument {
            op: "masked_mean_rows",
            message: format!("mask of {} rows for shape {shape:?}", mask.len()),
        });
    }
    let live = mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(TensorError::BadArgument {
            op: "masked_mean_rows",
            message: String::from("all rows masked"),
        });
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / live as f64 } else { 0.0 }).collect();
    let wv = sess.constant_f64(&w, vec![1, shape[0]])?;
    sess.tape.matmul(wv, x)
}

/// Mean squared error over all elements.
pub fn mse<E: Element>(sess: &mut Session<'_, E>, a: Var, b: Var) -> Result<Var> {
    let d = sess.tape.sub(a, b)?;
    let sq = sess.tape.mul(d, d)?;
    sess.tape.mean_all(sq)
}

/// Sinusoidal features of a scalar position: `dim/2` sine, `dim/2` cosine
/// channels with log-spaced frequencies from 1 down to 1/10000.
pub fn sinusoidal(dim: usize, pos: f64) -> Vec<f64> {
    debug_assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = libm::exp(-libm::log(10_000.0) * exponent);
        out[i] = libm::sin(pos * freq);
        out[half + i] = libm::cos(pos * freq);
    }
    out
}

// ── layers ──

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(path: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: format!("{path}.w"),
            b: bias.then(|| format!("{path}.b")),
            d_in,
            d_out,
        }
    }

    /// Uniform ±1/√d_in weights, zero bias.
    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        let bound = 1.0 / libm::sqrt(self.d_in as f64);
        store.add_uniform(rng, &self.w, vec![self.d_in, self.d_out], bound)?;
        if let Some(b) = &self.b {
            store.add_zeros(b, vec![self.d_out])?;
        }
        Ok(())
    }

    /// `x: [n, d_in] → [n, d_out]`.
    pub fn forward<E: Element>(&self, sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let w = sess.param(&self.w)?;
        let y = sess.tape.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = sess.param(b)?;
                sess.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer MLP with exact-GELU activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(path: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            fc1: Linear::new(&format!("{path}.fc1"), d_in, d_hidden, true),
            fc2: Linear::new(&format!("{path}.fc2"), d_hidden, d_out, true),
        }
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.fc1.register(store, rng)?;
        self.fc2.register(store, rng)
    }

    pub fn forward<E: Element>(&self, sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(sess, x)?;
        let h = sess.tape.gelu(h)?;
        self.fc2.forward(sess, h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(path: &str, d: usize) -> Self {
        LayerNorm { gain: format!("{path}.gain"), bias: format!("{path}.bias"), d }
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>) -> Result<()> {
        store.add_const(&self.gain, vec![self.d], 1.0)?;
        store.add_zeros(&self.bias, vec![self.d])
    }

    pub fn forward<E: Element>(&self, sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let g = sess.param(&self.gain)?;
        let b = sess.param(&self.bias)?;
        sess.tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention. Queries may come from one stream
/// and keys/values from another (cross attention); `key_mask` marks live keys.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(path: &str, d_q: usize, d_kv: usize, d_model: usize, heads: usize) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(TensorError::BadArgument {
                op: "attention",
                message: format!("d_model {d_model} not divisible by {heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&format!("{path}.wq"), d_q, d_model, true),
            wk: Linear::new(&format!("{path}.wk"), d_kv, d_model, true),
            wv: Linear::new(&format!("{path}.wv"), d_kv, d_model, true),
            wo: Linear::new(&format!("{path}.wo"), d_model, d_q, true),
            d_model,
            heads,
        })
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.wq.register(store, rng)?;
        self.wk.register(store, rng)?;
        self.wv.register(store, rng)?;
        self.wo.register(store, rng)
    }

    /// `q_in: [Lq, d_q]`, `kv_in: [Lkv, d_kv]` → `[Lq, d_q]`.
    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        q_in: Var,
        kv_in: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let l_q = sess.tape.shape(q_in)[0];
        let l_kv = sess.tape.shape(kv_in)[0];
        if let Some(mask) = key_mask {
            if mask.len() != l_kv {
                return Err(TensorError::BadArgument {
                    op: "attention",
                    message: format!("key mask of {} for {l_kv} keys", mask.len()),
                });
            }
        }
        let q = self.wq.forward(sess, q_in)?;
        let k = self.wk.forward(sess, kv_in)?;
        let v = self.wv.forward(sess, kv_in)?;

        let d_head = self.d_model / self.heads;
        let scale = 1.0 / libm::sqrt(d_head as f64);
        let mask_const = key_mask
            .map(|mask| {
                let mut m = Vec::with_capacity(l_q * l_kv);
                for _ in 0..l_q {
                    for &live in mask {
                        m.push(if live { 0.0 } else { KEY_MASK_NEG });
                    }
                }
                sess.constant_f64(&m, vec![l_q, l_kv])
            })
            .transpose()?;

        let mut merged: Option<Var> = None;
        for h in 0..self.heads {
            let (from, to) = (h * d_head, (h + 1) * d_head);
            let qh = slice_cols(sess, q, from, to)?;
            let kh = slice_cols(sess, k, from, to)?;
            let vh = slice_cols(sess, v, from, to)?;
            let kt = sess.tape.transpose2d(kh)?;
            let logits = sess.tape.matmul(qh, kt)?;
            let logits = sess.tape.scale(logits, scale)?;
            let logits = match mask_const {
                Some(m) => sess.tape.add(logits, m)?,
                None => logits,
            };
            let attn = sess.tape.softmax(logits)?;
            let out_h = sess.tape.matmul(attn, vh)?;
            merged = Some(match merged {
                Some(acc) => sess.tape.concat(acc, out_h, 1)?,
                None => out_h,
            });
        }
        self.wo.forward(sess, merged.unwrap())
    }
}
