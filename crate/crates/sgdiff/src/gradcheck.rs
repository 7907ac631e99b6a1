//! Finite-difference battery over every exported layer plus the full
//! model, runnable from the CLI. Each row compares analytic gradients
//! against 64-bit central differences on a small fixed rig.

use sgdiff_core::graphconv::{GraphConvConfig, GraphEncoder};
use sgdiff_core::nn::{LayerNorm, Linear};
use sgdiff_core::rng::{stream, Prng};
use sgdiff_core::scenegraph::parse_caption;
use sgdiff_core::swin::{PatchExpand, PatchMerge, SwinBlock, WindowAttention};
use sgdiff_core::tensor::{grad_check, GRAD_CHECK_STEP};
use sgdiff_core::textenc::{TextEncoder, TextEncoderConfig, Vocabulary};
use sgdiff_core::unet::{ConditionalEmbeddings, DBlock, UBlock, UNetConfig, UNetModel};
use sgdiff_core::{ParamStore, Session};

use crate::error::{AppError, Result};

const D_COND: usize = 8;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub entries: usize,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn row(
    name: &'static str,
    tol: f64,
    store: &mut ParamStore<f64>,
    cap: usize,
    step: f64,
    build: impl Fn(&mut Session<'_, f64>) -> sgdiff_core::tensor::Result<sgdiff_core::Var>,
) -> Result<CheckRow> {
    let report = grad_check(store, cap, step, build).map_err(AppError::Math)?;
    Ok(CheckRow {
        name,
        max_rel_err: report.max_rel_err,
        tol,
        entries: report.entries_checked,
    })
}

/// A fixed conditioning bundle: three live rows of constants.
fn fixed_cond(
    sess: &mut Session<'_, f64>,
) -> sgdiff_core::tensor::Result<ConditionalEmbeddings> {
    let seq_data: Vec<f64> = (0..3 * D_COND).map(|i| 0.07 * i as f64 - 0.8).collect();
    let seq = sess.constant_f64(&seq_data, vec![3, D_COND])?;
    let mask = vec![true, true, true];
    let pooled = sgdiff_core::nn::masked_mean_rows(sess, seq, &mask)?;
    Ok(ConditionalEmbeddings { seq, pooled, mask })
}

fn weighted_mean(
    sess: &mut Session<'_, f64>,
    y: sgdiff_core::Var,
    n: usize,
) -> sgdiff_core::tensor::Result<sgdiff_core::Var> {
    let shape = sess.tape.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i % 11) as f64) * 0.1 - 0.5).collect();
    let wv = sess.constant_f64(&w, shape)?;
    let p = sess.tape.mul(y, wv)?;
    sess.tape.mean_all(p)
}

fn check_layer_norm() -> Result<CheckRow> {
    let ln = LayerNorm::new("ln", 6);
    let mut store = ParamStore::new();
    let mut rng = Prng::new(101, stream::INIT);
    ln.register(&mut store).map_err(AppError::Math)?;
    let x = rng.normal_vec(4 * 6);
    row("layer_norm", 1e-4, &mut store, 0, GRAD_CHECK_STEP, |sess| {
        let xv = sess.constant_f64(&x, vec![4, 6])?;
        let y = ln.forward(sess, xv)?;
        weighted_mean(sess, y, 4 * 6)
    })
}

fn check_gelu() -> Result<CheckRow> {
    // gelu has no parameters of its own; a linear layer in front turns
    // the probe into a test of the gelu backward rule.
    let lin = Linear::new("lin", 5, 5, true);
    let mut store = ParamStore::new();
    let mut rng = Prng::new(103, stream::INIT);
    lin.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(3 * 5);
    row("gelu", 1e-4, &mut store, 0, GRAD_CHECK_STEP, |sess| {
        let xv = sess.constant_f64(&x, vec![3, 5])?;
        let h = lin.forward(sess, xv)?;
        let y = sess.tape.gelu(h)?;
        weighted_mean(sess, y, 3 * 5)
    })
}

fn check_cosine_attention() -> Result<CheckRow> {
    let attn = WindowAttention::new("wa", 8, 2, 2).map_err(AppError::Math)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::new(105, stream::INIT);
    attn.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(16 * 8);
    // The fresh temperature steepens the softmax; a finer probe step
    // keeps truncation error below the tolerance.
    row("cosine_attention", 1e-4, &mut store, 4, 1e-4, |sess| {
        let xv = sess.constant_f64(&x, vec![16, 8])?;
        let y = attn.forward(sess, xv, 4, 4, 1)?;
        weighted_mean(sess, y, 16 * 8)
    })
}

fn check_swin_block() -> Result<CheckRow> {
    let block = SwinBlock::new("sb", 8, 2, 2, true).map_err(AppError::Math)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::new(107, stream::INIT);
    block.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(16 * 8);
    row("swin_block", 1e-4, &mut store, 4, 1e-4, |sess| {
        let xv = sess.constant_f64(&x, vec![16, 8])?;
        let y = block.forward(sess, xv, 4, 4)?;
        weighted_mean(sess, y, 16 * 8)
    })
}

fn check_patch_merge() -> Result<CheckRow> {
    let merge = PatchMerge::new("pm", 3);
    let mut store = ParamStore::new();
    let mut rng = Prng::new(109, stream::INIT);
    merge.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(16 * 3);
    row("patch_merge", 1e-4, &mut store, 0, GRAD_CHECK_STEP, |sess| {
        let xv = sess.constant_f64(&x, vec![16, 3])?;
        let y = merge.forward(sess, xv, 4, 4)?;
        weighted_mean(sess, y, 4 * 6)
    })
}

fn check_patch_expand() -> Result<CheckRow> {
    let expand = PatchExpand::new("pe", 6).map_err(AppError::Math)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::new(111, stream::INIT);
    expand.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(4 * 6);
    row("patch_expand", 1e-4, &mut store, 0, GRAD_CHECK_STEP, |sess| {
        let xv = sess.constant_f64(&x, vec![4, 6])?;
        let y = expand.forward(sess, xv, 2, 2)?;
        weighted_mean(sess, y, 16 * 3)
    })
}

fn check_dblock() -> Result<CheckRow> {
    let mut parity = 0;
    let block =
        DBlock::new("db", 8, D_COND, 2, 2, 4, 2, &mut parity).map_err(AppError::Math)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::new(113, stream::INIT);
    block.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(16 * 8);
    let temb: Vec<f64> = (0..D_COND).map(|i| 0.1 * i as f64 - 0.35).collect();
    row("dblock", 1e-4, &mut store, 3, 1e-4, |sess| {
        let cond = fixed_cond(sess)?;
        let t = sess.constant_f64(&temb, vec![1, D_COND])?;
        let xv = sess.constant_f64(&x, vec![16, 8])?;
        let y = block.forward(sess, xv, 4, 4, &cond, t)?;
        weighted_mean(sess, y, 16 * 8)
    })
}

fn check_ublock() -> Result<CheckRow> {
    let mut parity = 0;
    let block =
        UBlock::new("ub", 8, D_COND, 2, 2, 4, 2, &mut parity).map_err(AppError::Math)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::new(115, stream::INIT);
    block.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let x = rng.normal_vec(16 * 8);
    let skip = rng.normal_vec(16 * 8);
    let temb: Vec<f64> = (0..D_COND).map(|i| 0.08 * i as f64 - 0.3).collect();
    // This rig needs an even finer probe than the other attention rows:
    // the fused skip doubles the input scale into the first softmax.
    row("ublock", 1e-4, &mut store, 3, 2e-5, |sess| {
        let cond = fixed_cond(sess)?;
        let t = sess.constant_f64(&temb, vec![1, D_COND])?;
        let xv = sess.constant_f64(&x, vec![16, 8])?;
        let sv = sess.constant_f64(&skip, vec![16, 8])?;
        let y = block.forward(sess, xv, sv, 4, 4, &cond, t)?;
        weighted_mean(sess, y, 16 * 8)
    })
}

fn check_graphconv() -> Result<CheckRow> {
    let enc = GraphEncoder::new(
        "g",
        GraphConvConfig {
            d: 6,
            hidden: 8,
            layers: 1,
        },
    );
    let mut store = ParamStore::new();
    let mut rng = Prng::new(117, stream::INIT);
    enc.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let g = parse_caption("a red circle left of a blue square")
        .map_err(|e| AppError::Caption(format!("{:?}", e)))?;
    row("graphconv", 1e-4, &mut store, 5, GRAD_CHECK_STEP, move |sess| {
        let out = enc.forward(sess, &g)?;
        let wn: Vec<f64> = (0..2 * 6).map(|i| ((i % 5) as f64) * 0.2 - 0.4).collect();
        let wnv = sess.constant_f64(&wn, vec![2, 6])?;
        let pn = sess.tape.mul(out.nodes, wnv)?;
        let sn = sess.tape.sum_all(pn)?;
        let we: Vec<f64> = (0..6).map(|i| ((i % 3) as f64) * 0.3 - 0.2).collect();
        let wev = sess.constant_f64(&we, vec![1, 6])?;
        let pe = sess.tape.mul(out.edges.expect("one edge"), wev)?;
        let se = sess.tape.sum_all(pe)?;
        sess.tape.add(sn, se)
    })
}

fn check_full_unet() -> Result<CheckRow> {
    let cfg = UNetConfig {
        resolution: 8,
        patch: 1,
        c_in: 3,
        c_out: 3,
        embed_dim: 6,
        merges: 1,
        num_block: 2,
        heads: 2,
        d_cond: D_COND,
        t_max: 50,
        predict_x0: false,
        full_attention: false,
    };
    let vocab = Vocabulary::world();
    let text = TextEncoder::new(
        "tx",
        TextEncoderConfig {
            vocab_size: vocab.len(),
            d_text: 10,
            layers: 1,
            heads: 2,
            max_len: 12,
        },
    )
    .map_err(AppError::Math)?;
    let graph = GraphEncoder::new(
        "g",
        GraphConvConfig {
            d: 6,
            hidden: 10,
            layers: 1,
        },
    );
    let model = UNetModel::new("m", cfg, 10, 6).map_err(AppError::Math)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::new(119, stream::INIT);
    text.register(&mut store, &mut rng).map_err(AppError::Math)?;
    graph.register(&mut store, &mut rng).map_err(AppError::Math)?;
    model.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let ids = vocab.encode_padded("a red circle left of a blue square", 10);
    let g = parse_caption("a red circle left of a blue square")
        .map_err(|e| AppError::Caption(format!("{:?}", e)))?;
    let mut rng = Prng::new(121, stream::EVAL);
    let zd = rng.normal_vec(64 * 3);
    // Probe step matches the sharp-softmax curvature of fresh cosine
    // attention; see the per-layer comment above.
    row("unet_8px", 1e-3, &mut store, 2, 2e-5, move |sess| {
        let enc = text.forward(sess, &ids)?;
        let genc = graph.forward(sess, &g)?;
        let cond = model.conditioner().build(sess, &enc, Some(&genc))?;
        let z = sess.constant_f64(&zd, vec![64, 3])?;
        let y = model.forward(sess, z, 7, &cond)?;
        weighted_mean(sess, y, 64 * 3)
    })
}

/// Runs the whole battery in a fixed order.
pub fn run_battery() -> Result<Vec<CheckRow>> {
    Ok(vec![
        check_layer_norm()?,
        check_gelu()?,
        check_cosine_attention()?,
        check_swin_block()?,
        check_patch_merge()?,
        check_patch_expand()?,
        check_dblock()?,
        check_ublock()?,
        check_graphconv()?,
        check_full_unet()?,
    ])
}

/// Formats one line per row, `ok`/`FAIL` first.
pub fn format_rows(rows: &[CheckRow]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!(
            "{} {:<18} max_rel_err {:.3e} (tol {:.0e}, {} entries)\n",
            if r.pass() { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tol,
            r.entries
        ));
    }
    s
}
