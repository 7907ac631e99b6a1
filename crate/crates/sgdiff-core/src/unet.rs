//! Denoiser network: token-grid UNet built from shifted-window transformer
//! blocks. The encoder halves the grid with patch merges, the decoder mirrors
//! it with patch expands and skip connections, and every block conditions on
//! caption/graph embeddings through a broadcast add plus one cross-attention
//! layer.

use alloc::vec::Vec;

use crate::graphconv::GraphEncoding;
use crate::nn::{masked_mean_rows, reshape, sinusoidal, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamStore, Session};
use crate::rng::Prng;
use crate::swin::{merge_neighborhoods, PatchExpand, PatchMerge, SwinBlock};
use crate::tensor::{Result, TensorError, Var};
use crate::textenc::TextEncoding;
use crate::Element;

// ── conditioning ──

/// Caption and graph features fused into one conditioning stream. `seq` rows
/// are text tokens, then objects, then relations, all projected to `d_cond`;
/// `pooled` is the masked mean of `seq`; `mask` marks live rows.
pub struct ConditionalEmbeddings {
    pub seq: Var,
    pub pooled: Var,
    pub mask: Vec<bool>,
}

/// Per-source adapters onto the shared conditioning width, plus the timestep
/// embedding MLP.
pub struct Conditioner {
    text_adapter: Linear,
    obj_adapter: Linear,
    rel_adapter: Linear,
    temb: Mlp,
    d_cond: usize,
}

impl Conditioner {
    pub fn new(path: &str, d_text: usize, d_graph: usize, d_cond: usize) -> Self {
        Conditioner {
            text_adapter: Linear::new(&alloc::format!("{path}.text"), d_text, d_cond, true),
            obj_adapter: Linear::new(&alloc::format!("{path}.obj"), d_graph, d_cond, true),
            rel_adapter: Linear::new(&alloc::format!("{path}.rel"), d_graph, d_cond, true),
            temb: Mlp::new(&alloc::format!("{path}.temb"), d_cond, 4 * d_cond, d_cond),
            d_cond,
        }
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.text_adapter.register(store, rng)?;
        self.obj_adapter.register(store, rng)?;
        self.rel_adapter.register(store, rng)?;
        self.temb.register(store, rng)
    }

    /// Concatenate projected text, object, and relation rows in that order.
    pub fn build<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        text: &TextEncoding,
        graph: Option<&GraphEncoding>,
    ) -> Result<ConditionalEmbeddings> {
        let mut seq = self.text_adapter.forward(sess, text.seq)?;
        let mut mask = text.mask.clone();
        if let Some(g) = graph {
            let objs = self.obj_adapter.forward(sess, g.nodes)?;
            let n_obj = sess.tape.shape(objs)[0];
            seq = sess.tape.concat(seq, objs, 0)?;
            mask.extend(core::iter::repeat(true).take(n_obj));
            if let Some(edges) = g.edges {
                let rels = self.rel_adapter.forward(sess, edges)?;
                let n_rel = sess.tape.shape(rels)[0];
                seq = sess.tape.concat(seq, rels, 0)?;
                mask.extend(core::iter::repeat(true).take(n_rel));
            }
        }
        let pooled = masked_mean_rows(sess, seq, &mask)?;
        Ok(ConditionalEmbeddings { seq, pooled, mask })
    }

    /// Sinusoidal timestep features through the 2-layer MLP; `[1, d_cond]`.
    pub fn timestep<E: Element>(&self, sess: &mut Session<'_, E>, t: usize) -> Result<Var> {
        let feats = sinusoidal(self.d_cond, t as f64);
        let f = sess.constant_f64(&feats, alloc::vec![1, self.d_cond])?;
        self.temb.forward(sess, f)
    }
}

// ── blocks ──

/// Shared tail of both block kinds: broadcast conditioning add, one
/// cross-attention layer over the conditioning sequence, then the swin stack.
struct BlockCore {
    proj: Linear,
    xattn: MultiHeadAttention,
    swins: Vec<SwinBlock>,
}

impl BlockCore {
    fn new(
        path: &str,
        dim: usize,
        d_cond: usize,
        heads: usize,
        win: usize,
        side: usize,
        num_block: usize,
        parity: &mut usize,
    ) -> Result<Self> {
        if num_block < 2 {
            return Err(TensorError::BadArgument {
                op: "unet_block",
                message: alloc::format!("num_block {num_block} < 2"),
            });
        }
        let proj = Linear::new(&alloc::format!("{path}.proj"), d_cond, dim, true);
        let xattn =
            MultiHeadAttention::new(&alloc::format!("{path}.xattn"), dim, d_cond, dim, heads)?;
        let mut swins = Vec::with_capacity(num_block - 1);
        for i in 0..num_block - 1 {
            // Shifting a window that already spans the grid only scrambles
            // the relative-position table, so it is skipped.
            let shifted = *parity % 2 == 1 && win > 1 && win < side;
            *parity += 1;
            swins.push(SwinBlock::new(&alloc::format!("{path}.swin{i}"), dim, heads, win, shifted)?);
        }
        Ok(BlockCore { proj, xattn, swins })
    }

    fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.proj.register(store, rng)?;
        self.xattn.register(store, rng)?;
        for s in &self.swins {
            s.register(store, rng)?;
        }
        Ok(())
    }

    fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        mut x: Var,
        h: usize,
        w: usize,
        cond: &ConditionalEmbeddings,
        t_emb: Var,
    ) -> Result<Var> {
        let ct = sess.tape.add(cond.pooled, t_emb)?;
        let bias_row = self.proj.forward(sess, ct)?;
        let dim = sess.tape.shape(bias_row)[1];
        let bias = reshape(sess, bias_row, alloc::vec![dim])?;
        x = sess.tape.add_bias(x, bias)?;
        let a = self.xattn.forward(sess, x, cond.seq, Some(&cond.mask))?;
        x = sess.tape.add(x, a)?;
        for s in &self.swins {
            x = s.forward(sess, x, h, w)?;
        }
        Ok(x)
    }
}

/// Encoder block.
pub struct DBlock {
    core: BlockCore,
}

impl DBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        path: &str,
        dim: usize,
        d_cond: usize,
        heads: usize,
        win: usize,
        side: usize,
        num_block: usize,
        parity: &mut usize,
    ) -> Result<Self> {
        Ok(DBlock { core: BlockCore::new(path, dim, d_cond, heads, win, side, num_block, parity)? })
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.core.register(store, rng)
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        x: Var,
        h: usize,
        w: usize,
        cond: &ConditionalEmbeddings,
        t_emb: Var,
    ) -> Result<Var> {
        self.core.forward(sess, x, h, w, cond, t_emb)
    }
}

/// Decoder block: fuses the skip connection back to the stage width first.
pub struct UBlock {
    fuse: Linear,
    core: BlockCore,
}

impl UBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        path: &str,
        dim: usize,
        d_cond: usize,
        heads: usize,
        win: usize,
        side: usize,
        num_block: usize,
        parity: &mut usize,
    ) -> Result<Self> {
        Ok(UBlock {
            fuse: Linear::new(&alloc::format!("{path}.fuse"), 2 * dim, dim, true),
            core: BlockCore::new(path, dim, d_cond, heads, win, side, num_block, parity)?,
        })
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.fuse.register(store, rng)?;
        self.core.register(store, rng)
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        x: Var,
        skip: Var,
        h: usize,
        w: usize,
        cond: &ConditionalEmbeddings,
        t_emb: Var,
    ) -> Result<Var> {
        let xs = sess.tape.shape(x).to_vec();
        let ss = sess.tape.shape(skip).to_vec();
        if xs != ss {
            return Err(TensorError::ShapeMismatch { op: "ublock", lhs: xs, rhs: ss });
        }
        let cat = sess.tape.concat(x, skip, 1)?;
        let fused = self.fuse.forward(sess, cat)?;
        self.core.forward(sess, fused, h, w, cond, t_emb)
    }
}

// ── full model ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    pub resolution: usize,
    pub patch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub embed_dim: usize,
    pub merges: usize,
    pub num_block: usize,
    pub heads: usize,
    pub d_cond: usize,
    pub t_max: usize,
    /// Predict the clean image instead of the noise.
    pub predict_x0: bool,
    /// Replace windowed attention with one full-grid window per stage
    /// (no shifting); the plain-transformer ablation.
    pub full_attention: bool,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.resolution >= 1
            && (self.patch == 1 || self.patch == 2)
            && self.resolution % self.patch == 0
            && self.c_in >= 1
            && self.c_out >= 1
            && self.embed_dim >= 1
            && self.num_block >= 2
            && self.heads >= 1
            && self.t_max >= 1;
        let grid = self.resolution / self.patch.max(1);
        if !ok || grid == 0 || grid % (1 << self.merges) != 0 || (grid >> self.merges) < 1 {
            return Err(TensorError::BadArgument {
                op: "unet_config",
                message: alloc::format!("{self:?}"),
            });
        }
        Ok(())
    }

    /// Token-grid side at an encoder stage.
    pub fn side(&self, stage: usize) -> usize {
        (self.resolution / self.patch) >> stage
    }

    pub fn dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Largest power-of-two window up to 4 that tiles the stage, or the
    /// whole grid when windowing is disabled.
    pub fn window(&self, stage: usize) -> usize {
        if self.full_attention {
            self.side(stage)
        } else {
            self.side(stage).min(4)
        }
    }
}

pub struct UNetModel {
    cfg: UNetConfig,
    cond: Conditioner,
    embed: Linear,
    enc: Vec<DBlock>,
    merges: Vec<PatchMerge>,
    expands: Vec<PatchExpand>,
    dec: Vec<UBlock>,
    final_expand: Option<PatchExpand>,
    head: Linear,
}

impl UNetModel {
    pub fn new(path: &str, cfg: UNetConfig, d_text: usize, d_graph: usize) -> Result<Self> {
        cfg.validate()?;
        let cond = Conditioner::new(&alloc::format!("{path}.cond"), d_text, d_graph, cfg.d_cond);
        let embed = Linear::new(
            &alloc::format!("{path}.embed"),
            cfg.c_in * cfg.patch * cfg.patch,
            cfg.embed_dim,
            true,
        );
        let mut parity = 0usize;
        let mut enc = Vec::new();
        let mut merges = Vec::new();
        for s in 0..=cfg.merges {
            enc.push(DBlock::new(
                &alloc::format!("{path}.d{s}"),
                cfg.dim(s),
                cfg.d_cond,
                cfg.heads,
                cfg.window(s),
                cfg.side(s),
                cfg.num_block,
                &mut parity,
            )?);
            if s < cfg.merges {
                merges.push(PatchMerge::new(&alloc::format!("{path}.merge{s}"), cfg.dim(s)));
            }
        }
        let mut expands = Vec::new();
        let mut dec = Vec::new();
        for s in (0..cfg.merges).rev() {
            expands.push(PatchExpand::new(&alloc::format!("{path}.expand{s}"), cfg.dim(s + 1))?);
            dec.push(UBlock::new(
                &alloc::format!("{path}.u{s}"),
                cfg.dim(s),
                cfg.d_cond,
                cfg.heads,
                cfg.window(s),
                cfg.side(s),
                cfg.num_block,
                &mut parity,
            )?);
        }
        let (final_expand, head_in) = if cfg.patch == 2 {
            (
                Some(PatchExpand::new(&alloc::format!("{path}.expand_out"), cfg.embed_dim)?),
                cfg.embed_dim / 2,
            )
        } else {
            (None, cfg.embed_dim)
        };
        let head = Linear::new(&alloc::format!("{path}.head"), head_in, cfg.c_out, true);
        Ok(UNetModel { cfg, cond, embed, enc, merges, expands, dec, final_expand, head })
    }

    pub fn config(&self) -> UNetConfig {
        self.cfg
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.cond
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.cond.register(store, rng)?;
        self.embed.register(store, rng)?;
        for b in &self.enc {
            b.register(store, rng)?;
        }
        for m in &self.merges {
            m.register(store, rng)?;
        }
        for e in &self.expands {
            e.register(store, rng)?;
        }
        for b in &self.dec {
            b.register(store, rng)?;
        }
        if let Some(fe) = &self.final_expand {
            fe.register(store, rng)?;
        }
        self.head.register(store, rng)
    }

    /// `z: [resolution^2, c_in]` pixels row-major; `t` in `[1, t_max]`.
    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        z: Var,
        t: usize,
        cond: &ConditionalEmbeddings,
    ) -> Result<Var> {
        let res = self.cfg.resolution;
        let shape = sess.tape.shape(z).to_vec();
        if shape.len() != 2 || shape[0] != res * res || shape[1] != self.cfg.c_in {
            return Err(TensorError::BadShape { op: "unet", shape });
        }
        if t < 1 || t > self.cfg.t_max {
            return Err(TensorError::BadArgument {
                op: "unet",
                message: alloc::format!("timestep {t} outside [1, {}]", self.cfg.t_max),
            });
        }
        let t_emb = self.cond.timestep(sess, t)?;

        let mut x = if self.cfg.patch == 2 {
            let patched = merge_neighborhoods(sess, z, res, res)?;
            self.embed.forward(sess, patched)?
        } else {
            self.embed.forward(sess, z)?
        };

        let mut skips: Vec<Var> = Vec::with_capacity(self.cfg.merges);
        for (s, block) in self.enc.iter().enumerate() {
            let side = self.cfg.side(s);
            x = block.forward(sess, x, side, side, cond, t_emb)?;
            if s < self.cfg.merges {
                skips.push(x);
                x = self.merges[s].forward(sess, x, side, side)?;
            }
        }
        for (i, s) in (0..self.cfg.merges).rev().enumerate() {
            let upper = self.cfg.side(s + 1);
            x = self.expands[i].forward(sess, x, upper, upper)?;
            let side = self.cfg.side(s);
            x = self.dec[i].forward(sess, x, skips[s], side, side, cond, t_emb)?;
        }
        if let Some(fe) = &self.final_expand {
            let grid = self.cfg.side(0);
            x = fe.forward(sess, x, grid, grid)?;
        }
        self.head.forward(sess, x)
    }
}
