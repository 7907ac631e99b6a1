//! Reverse-mode autodiff on a flat tape.
//!
//! A [`Tape`] owns every tensor created during one forward pass; a [`Var`] is
//! an index into it. Ops append nodes, so node order is already a topological
//! order and [`Tape::backward`] is a single reverse sweep that touches each
//! node exactly once. The tape is single-threaded by construction.
//!
//! Numeric contract, relied on throughout the crate:
//! - reductions accumulate sequentially in index order;
//! - every primitive checks its output for NaN/Inf and errors out instead of
//!   letting poison spread;
//! - shapes are lists of strictly positive extents, row-major layout.

mod check;

pub use check::{grad_check, GradCheckReport, GRAD_CHECK_STEP};

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::element::Element;

/// Epsilon inside layer normalization's variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Epsilon inside row L2 normalization, guarding zero rows.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
    },
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    BadIndex {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    NonFinite {
        op: &'static str,
    },
    MissingParam {
        path: String,
    },
    RowsNotNormalized {
        row: usize,
        sum: f64,
    },
    BadArgument {
        op: &'static str,
        message: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::BadShape { op, shape } => write!(f, "{op}: bad shape {shape:?}"),
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected scalar, got shape {shape:?}")
            }
            TensorError::BadIndex { op, index, bound } => {
                write!(f, "{op}: index {index} out of bound {bound}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            TensorError::MissingParam { path } => write!(f, "missing parameter `{path}`"),
            TensorError::RowsNotNormalized { row, sum } => {
                write!(f, "row {row} sums to {sum}, expected 1")
            }
            TensorError::BadArgument { op, message } => write!(f, "{op}: {message}"),
        }
    }
}

impl core::error::Error for TensorError {}

pub type Result<T> = core::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddBias { a: usize, b: usize },
    Gather { a: usize, idx: Rc<Vec<usize>> },
    Concat { a: usize, b: usize, axis: usize },
    Softmax { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize },
    Gelu { a: usize },
    L2NormRows { a: usize },
    Recip { a: usize },
    MulScalar { a: usize, s: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    CrossEntropyLogits { a: usize, targets: Rc<Vec<usize>> },
}

struct Node<E> {
    data: Vec<E>,
    shape: Vec<usize>,
    op: Op,
    /// True when this node's value influences some grad-requiring leaf.
    track: bool,
    grad: Option<Vec<E>>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::BadShape { op, shape: shape.to_vec() });
    }
    Ok(())
}

fn check_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
    }
    Ok(())
}

/// `out += a · b` for row-major `a: [m,k]`, `b: [k,n]`.
fn matmul_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// `out += aᵀ · b` for `a: [m,k]`, `b: [m,n]`, out `[k,n]`.
fn matmul_at_b_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// `out += a · bᵀ` for `a: [m,k]`, `b: [n,k]`, out `[m,n]`.
fn matmul_a_bt_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

fn softmax_row<E: Element>(row: &[E], out: &mut [E]) {
    let mut max = row[0];
    for &v in &row[1..] {
        max = max.maximum(v);
    }
    let mut sum = E::ZERO;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, data: Vec<E>, shape: Vec<usize>, node_op: Op, track: bool) -> Result<Var> {
        check_shape(op, &shape)?;
        debug_assert_eq!(data.len(), numel(&shape));
        check_finite(op, &data)?;
        self.nodes.push(Node { data, shape, op: node_op, track, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].track
    }

    // ── leaves ──

    pub fn leaf(&mut self, data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if data.len() != numel(&shape) {
            return Err(TensorError::BadArgument {
                op: "leaf",
                message: format!("data length {} does not match shape {:?}", data.len(), shape),
            });
        }
        self.push("leaf", data, shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, c: f64) -> Result<Var> {
        self.constant(vec![E::from_f64(c)], vec![1])
    }

    // ── binary elementwise ──

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a) || self.tracked(b);
        self.push("add", data, shape, Op::Add { a: a.0, b: b.0 }, track)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a) || self.tracked(b);
        self.push("sub", data, shape, Op::Sub { a: a.0, b: b.0 }, track)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a) || self.tracked(b);
        self.push("mul", data, shape, Op::Mul { a: a.0, b: b.0 }, track)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64(c);
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * ce).collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a);
        self.push("scale", data, shape, Op::Scale { a: a.0, c }, track)
    }

    /// `a: [..., d] + b: [d]`, bias broadcast over leading axes.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = *self.nodes[a.0].shape.last().unwrap();
        if self.nodes[b.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let bias = &self.nodes[b.0].data;
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % d])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a) || self.tracked(b);
        self.push("add_bias", data, shape, Op::AddBias { a: a.0, b: b.0 }, track)
    }

    // ── structure ──

    /// `out[i] = a[idx[i]]`; covers slicing, transposition, rolls, window
    /// partition, nearest-neighbor upsampling. Backward scatter-adds, so
    /// duplicated indices accumulate.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        check_shape("gather", &out_shape)?;
        if idx.len() != numel(&out_shape) {
            return Err(TensorError::BadArgument {
                op: "gather",
                message: format!("{} indices for shape {:?}", idx.len(), out_shape),
            });
        }
        let src = &self.nodes[a.0].data;
        let bound = src.len();
        let mut data = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= bound {
                return Err(TensorError::BadIndex { op: "gather", index: i, bound });
            }
            data.push(src[i]);
        }
        let track = self.tracked(a);
        self.push("gather", data, out_shape, Op::Gather { a: a.0, idx: Rc::new(idx) }, track)
    }

    /// Transpose a `[m, n]` tensor to `[n, m]`.
    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::BadShape { op: "transpose2d", shape });
        }
        let (m, n) = (shape[0], shape[1]);
        let mut idx = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                idx.push(i * n + j);
            }
        }
        self.gather(a, idx, vec![n, m])
    }

    /// Concatenate along `axis`; shapes must agree elsewhere.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let rank_ok = sa.len() == sb.len() && axis < sa.len();
        let rest_ok = rank_ok && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !rest_ok {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: sa, rhs: sb });
        }
        let outer: usize = sa[..axis].iter().product();
        let a_block: usize = sa[axis..].iter().product();
        let b_block: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * (a_block + b_block));
        for o in 0..outer {
            data.extend_from_slice(&self.nodes[a.0].data[o * a_block..(o + 1) * a_block]);
            data.extend_from_slice(&self.nodes[b.0].data[o * b_block..(o + 1) * b_block]);
        }
        let mut shape = sa.clone();
        shape[axis] = sa[axis] + sb[axis];
        let track = self.tracked(a) || self.tracked(b);
        self.push("concat", data, shape, Op::Concat { a: a.0, b: b.0, axis }, track)
    }

    // ── matmul ──

    /// `a: [m, k] · b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![E::ZERO; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let track = self.tracked(a) || self.tracked(b);
        self.push("matmul", data, vec![m, n], Op::MatMul { a: a.0, b: b.0, m, k, n }, track)
    }

    // ── row-wise nonlinearities (last axis) ──

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap();
        let rows = numel(&shape) / d;
        let mut data = vec![E::ZERO; rows * d];
        for r in 0..rows {
            softmax_row(&self.nodes[a.0].data[r * d..(r + 1) * d], &mut data[r * d..(r + 1) * d]);
        }
        let track = self.tracked(a);
        self.push("softmax", data, shape, Op::Softmax { a: a.0 }, track)
    }

    /// Normalize the last axis to zero mean, unit variance, then apply
    /// elementwise gain and bias (both shaped `[d]`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap();
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.nodes[v.0].shape != [d] {
                return Err(TensorError::BadArgument {
                    op: "layer_norm",
                    message: format!("{name} shape {:?}, expected [{d}]", self.nodes[v.0].shape),
                });
            }
        }
        let rows = numel(&shape) / d;
        let eps = E::from_f64(LAYER_NORM_EPS);
        let inv_d = E::from_f64(1.0 / d as f64);
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![E::ZERO; rows * d];
        for r in 0..rows {
            let x = &self.nodes[a.0].data[r * d..(r + 1) * d];
            let mut mean = E::ZERO;
            for &v in x {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = E::ZERO;
            for &v in x {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = E::ONE / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (x[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let track = self.tracked(a) || self.tracked(gain) || self.tracked(bias);
        self.push(
            "layer_norm",
            data,
            shape,
            Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0 },
            track,
        )
    }

    /// Exact GELU, `x · Φ(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * gauss_cdf(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a);
        self.push("gelu", data, shape, Op::Gelu { a: a.0 }, track)
    }

    /// Scale each row of the last axis to unit L2 norm; zero rows map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap();
        let rows = numel(&shape) / d;
        let eps = E::from_f64(L2_NORM_EPS);
        let mut data = vec![E::ZERO; rows * d];
        for r in 0..rows {
            let x = &self.nodes[a.0].data[r * d..(r + 1) * d];
            let mut sq = E::ZERO;
            for &v in x {
                sq += v * v;
            }
            let inv = E::ONE / (sq + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = x[j] * inv;
            }
        }
        let track = self.tracked(a);
        self.push("l2_normalize_rows", data, shape, Op::L2NormRows { a: a.0 }, track)
    }

    /// Elementwise reciprocal; used on strictly positive scalars (temperature).
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| E::ONE / x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a);
        self.push("recip", data, shape, Op::Recip { a: a.0 }, track)
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(&self.nodes[s.0].shape) != 1 {
            return Err(TensorError::NotScalar {
                op: "mul_scalar",
                shape: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let track = self.tracked(a) || self.tracked(s);
        self.push("mul_scalar", data, shape, Op::MulScalar { a: a.0, s: s.0 }, track)
    }

    // ── reductions ──

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = E::ZERO;
        for &v in &self.nodes[a.0].data {
            acc += v;
        }
        let track = self.tracked(a);
        self.push("sum_all", vec![acc], vec![1], Op::SumAll { a: a.0 }, track)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        let mut acc = E::ZERO;
        for &v in &self.nodes[a.0].data {
            acc += v;
        }
        let mean = acc * E::from_f64(1.0 / n as f64);
        let track = self.tracked(a);
        self.push("mean_all", vec![mean], vec![1], Op::MeanAll { a: a.0 }, track)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `a: [rows, classes]`. Stable via log-sum-exp.
    pub fn cross_entropy_logits(&mut self, a: Var, targets: Vec<usize>) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::BadShape { op: "cross_entropy_logits", shape });
        }
        let (rows, classes) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(TensorError::BadArgument {
                op: "cross_entropy_logits",
                message: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        let mut acc = E::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::BadIndex { op: "cross_entropy_logits", index: t, bound: classes });
            }
            let row = &self.nodes[a.0].data[r * classes..(r + 1) * classes];
            let mut max = row[0];
            for &v in &row[1..] {
                max = max.maximum(v);
            }
            let mut sum = E::ZERO;
            for &v in row {
                sum += (v - max).exp();
            }
            acc += sum.ln() + max - row[t];
        }
        let loss = acc * E::from_f64(1.0 / rows as f64);
        let track = self.tracked(a);
        self.push(
            "cross_entropy_logits",
            vec![loss],
            vec![1],
            Op::CrossEntropyLogits { a: a.0, targets: Rc::new(targets) },
            track,
        )
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls;
    /// use [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = loss.0 + 1;
        let mut local: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(vec![E::ONE]);

        for i in (0..n).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].track {
                local[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut local)?;
            local[i] = Some(g);
        }

        for (i, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].track {
                continue;
            }
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![E::ZERO; g.len()]);
            for (dst, src) in slot.iter_mut().zip(&g) {
                *dst += *src;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[E], local: &mut [Option<Vec<E>>]) -> Result<()> {
        let add_to = |local: &mut [Option<Vec<E>>], idx: usize, len: usize, f: &mut dyn FnMut(&mut [E])| {
            let slot = local[idx].get_or_insert_with(|| vec![E::ZERO; len]);
            f(slot);
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[*a].track {
                    add_to(local, *a, m * k, &mut |da| {
                        matmul_a_bt_acc(g, &self.nodes[*b].data, m, n, k, da);
                    });
                }
                if self.nodes[*b].track {
                    add_to(local, *b, k * n, &mut |db| {
                        matmul_at_b_acc(&self.nodes[*a].data, g, m, k, n, db);
                    });
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b] {
                    if self.nodes[p].track {
                        add_to(local, p, g.len(), &mut |d| {
                            for (dst, src) in d.iter_mut().zip(g) {
                                *dst += *src;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].track {
                    add_to(local, *a, g.len(), &mut |d| {
                        for (dst, src) in d.iter_mut().zip(g) {
                            *dst += *src;
                        }
                    });
                }
                if self.nodes[*b].track {
                    add_to(local, *b, g.len(), &mut |d| {
                        for (dst, src) in d.iter_mut().zip(g) {
                            *dst = *dst - *src;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].track {
                    let bd = &self.nodes[*b].data;
                    add_to(local, *a, g.len(), &mut |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * bd[j];
                        }
                    });
                }
                if self.nodes[*b].track {
                    let ad = &self.nodes[*a].data;
                    add_to(local, *b, g.len(), &mut |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * ad[j];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].track {
                    let ce = E::from_f64(*c);
                    add_to(local, *a, g.len(), &mut |d| {
                        for (dst, src) in d.iter_mut().zip(g) {
                            *dst += *src * ce;
                        }
                    });
                }
            }
            Op::AddBias { a, b } => {
                if self.nodes[*a].track {
                    add_to(local, *a, g.len(), &mut |d| {
                        for (dst, src) in d.iter_mut().zip(g) {
                            *dst += *src;
                        }
                    });
                }
                if self.nodes[*b].track {
                    let d_bias = self.nodes[*b].data.len();
                    add_to(local, *b, d_bias, &mut |d| {
                        for (j, src) in g.iter().enumerate() {
                            d[j % d_bias] += *src;
                        }
                    });
                }
            }
            Op::Gather { a, idx } => {
                if self.nodes[*a].track {
                    let len = self.nodes[*a].data.len();
                    add_to(local, *a, len, &mut |d| {
                        for (o, &src_idx) in idx.iter().enumerate() {
                            d[src_idx] += g[o];
                        }
                    });
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = &self.nodes[*a].shape;
                let sb = &self.nodes[*b].shape;
                let outer: usize = sa[..*axis].iter().product();
                let a_block: usize = sa[*axis..].iter().product();
                let b_block: usize = sb[*axis..].iter().product();
                let stride = a_block + b_block;
                if self.nodes[*a].track {
                    add_to(local, *a, outer * a_block, &mut |d| {
                        for o in 0..outer {
                            for j in 0..a_block {
                                d[o * a_block + j] += g[o * stride + j];
                            }
                        }
                    });
                }
                if self.nodes[*b].track {
                    add_to(local, *b, outer * b_block, &mut |d| {
                        for o in 0..outer {
                            for j in 0..b_block {
                                d[o * b_block + j] += g[o * stride + a_block + j];
                            }
                        }
                    });
                }
            }
            Op::Softmax { a } => {
                if self.nodes[*a].track {
                    let s = &node.data;
                    let d = *node.shape.last().unwrap();
                    let rows = s.len() / d;
                    add_to(local, *a, s.len(), &mut |dx| {
                        for r in 0..rows {
                            let s_row = &s[r * d..(r + 1) * d];
                            let g_row = &g[r * d..(r + 1) * d];
                            let mut dot = E::ZERO;
                            for j in 0..d {
                                dot += g_row[j] * s_row[j];
                            }
                            for j in 0..d {
                                dx[r * d + j] += s_row[j] * (g_row[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                let x_all = &self.nodes[*a].data;
                let g_all = &self.nodes[*gain].data;
                let eps = E::from_f64(LAYER_NORM_EPS);
                let inv_d = E::from_f64(1.0 / d as f64);
                // Recompute per-row stats; cheaper than saving them.
                for r in 0..rows {
                    let x = &x_all[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean = E::ZERO;
                    for &v in x {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = E::ZERO;
                    for &v in x {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var * inv_d;
                    let inv_std = E::ONE / (var + eps).sqrt();
                    if self.nodes[*gain].track || self.nodes[*bias].track {
                        if self.nodes[*gain].track {
                            add_to(local, *gain, d, &mut |dg| {
                                for j in 0..d {
                                    dg[j] += gr[j] * (x[j] - mean) * inv_std;
                                }
                            });
                        }
                        if self.nodes[*bias].track {
                            add_to(local, *bias, d, &mut |db| {
                                for j in 0..d {
                                    db[j] += gr[j];
                                }
                            });
                        }
                    }
                    if self.nodes[*a].track {
                        let mut sum_dxhat = E::ZERO;
                        let mut sum_dxhat_xhat = E::ZERO;
                        let mut dxhat = vec![E::ZERO; d];
                        for j in 0..d {
                            let xh = (x[j] - mean) * inv_std;
                            let dh = gr[j] * g_all[j];
                            dxhat[j] = dh;
                            sum_dxhat += dh;
                            sum_dxhat_xhat += dh * xh;
                        }
                        add_to(local, *a, rows * d, &mut |dx| {
                            for j in 0..d {
                                let xh = (x[j] - mean) * inv_std;
                                let de = E::from_f64(d as f64);
                                dx[r * d + j] +=
                                    inv_std * inv_d * (de * dxhat[j] - sum_dxhat - xh * sum_dxhat_xhat);
                            }
                        });
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].track {
                    let x = &self.nodes[*a].data;
                    add_to(local, *a, x.len(), &mut |d| {
                        for j in 0..x.len() {
                            d[j] += g[j] * gelu_deriv(x[j]);
                        }
                    });
                }
            }
            Op::L2NormRows { a } => {
                if self.nodes[*a].track {
                    let x_all = &self.nodes[*a].data;
                    let d = *node.shape.last().unwrap();
                    let rows = x_all.len() / d;
                    let eps = E::from_f64(L2_NORM_EPS);
                    add_to(local, *a, x_all.len(), &mut |dx| {
                        for r in 0..rows {
                            let x = &x_all[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let mut sq = E::ZERO;
                            let mut dot = E::ZERO;
                            for j in 0..d {
                                sq += x[j] * x[j];
                                dot += gr[j] * x[j];
                            }
                            let s = (sq + eps).sqrt();
                            let inv_s = E::ONE / s;
                            let inv_s3 = inv_s * inv_s * inv_s;
                            for j in 0..d {
                                dx[r * d + j] += gr[j] * inv_s - x[j] * dot * inv_s3;
                            }
                        }
                    });
                }
            }
            Op::Recip { a } => {
                if self.nodes[*a].track {
                    let y = &node.data;
                    add_to(local, *a, y.len(), &mut |d| {
                        for j in 0..y.len() {
                            d[j] = d[j] - g[j] * y[j] * y[j];
                        }
                    });
                }
            }
            Op::MulScalar { a, s } => {
                if self.nodes[*a].track {
                    let sv = self.nodes[*s].data[0];
                    add_to(local, *a, g.len(), &mut |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * sv;
                        }
                    });
                }
                if self.nodes[*s].track {
                    let ad = &self.nodes[*a].data;
                    add_to(local, *s, 1, &mut |d| {
                        let mut acc = E::ZERO;
                        for j in 0..g.len() {
                            acc += g[j] * ad[j];
                        }
                        d[0] += acc;
                    });
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].track {
                    let len = self.nodes[*a].data.len();
                    let g0 = g[0];
                    add_to(local, *a, len, &mut |d| {
                        for dst in d.iter_mut() {
                            *dst += g0;
                        }
                    });
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[*a].track {
                    let len = self.nodes[*a].data.len();
                    let g0 = g[0] * E::from_f64(1.0 / len as f64);
                    add_to(local, *a, len, &mut |d| {
                        for dst in d.iter_mut() {
                            *dst += g0;
                        }
                    });
                }
            }
            Op::CrossEntropyLogits { a, targets } => {
                if self.nodes[*a].track {
                    let x_all = &self.nodes[*a].data;
                    let classes = *self.nodes[*a].shape.last().unwrap();
                    let rows = targets.len();
                    let g0 = g[0] * E::from_f64(1.0 / rows as f64);
                    add_to(local, *a, x_all.len(), &mut |dx| {
                        let mut probs = vec![E::ZERO; classes];
                        for (r, &t) in targets.iter().enumerate() {
                            softmax_row(&x_all[r * classes..(r + 1) * classes], &mut probs);
                            for j in 0..classes {
                                let ind = if j == t { E::ONE } else { E::ZERO };
                                dx[r * classes + j] += g0 * (probs[j] - ind);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gaussian CDF `Φ(x)` via the error function.
fn gauss_cdf<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    half * (E::ONE + (x * inv_sqrt2).erf())
}

/// `d/dx [x · Φ(x)] = Φ(x) + x · φ(x)`.
fn gelu_deriv<E: Element>(x: E) -> E {
    let inv_sqrt_2pi = E::from_f64(0.3989422804014327);
    let half = E::from_f64(0.5);
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    gauss_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
        assert_eq!(actual.len(), expected.len(), "{what}: length");
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "{what}[{i}]: got {a}, expected {e} (tol {tol})"
            );
        }
    }

    /// Central finite differences on a leaf input, rebuilding the graph per
    /// perturbation. Independent of the backward pass.
    fn numeric_grad(
        build: impl Fn(&mut Tape<f64>, &[f64]) -> Var,
        x0: &[f64],
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x0.len());
        for i in 0..x0.len() {
            let mut xp = x0.to_vec();
            xp[i] += h;
            let mut tp = Tape::new();
            let lp = build(&mut tp, &xp);
            let mut xm = x0.to_vec();
            xm[i] -= h;
            let mut tm = Tape::new();
            let lm = build(&mut tm, &xm);
            out.push((tp.value(lp)[0] - tm.value(lm)[0]) / (2.0 * h));
        }
        out
    }

    // ── matmul ──

    #[test]
    fn matmul_identity() {
        let mut t: Tape<f64> = Tape::new();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let out = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_zeroes_second_row() {
        let mut t: Tape<f64> = Tape::new();
        let p = t.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let out = t.matmul(p, a).unwrap();
        assert_eq!(t.value(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = crate::rng::Prng::new(11, crate::rng::stream::INIT);
        let a: Vec<f64> = rng.normal_vec(3 * 4);
        let b: Vec<f64> = rng.normal_vec(4 * 2);
        // Oracle in ijk order, distinct from the implementation's ikj order.
        let mut expect = vec![0.0f64; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[i * 4 + k] * b[k * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        let mut t: Tape<f64> = Tape::new();
        let av = t.constant(a, vec![3, 4]).unwrap();
        let bv = t.constant(b, vec![4, 2]).unwrap();
        let out = t.matmul(av, bv).unwrap();
        assert_close(t.value(out), &expect, 1e-6, "matmul");
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    // ── softmax ──

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let s = t.softmax(x).unwrap();
        assert_close(t.value(s), &[0.5, 0.5], 1e-12, "softmax");
    }

    #[test]
    fn softmax_shift_invariant() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(logits.to_vec(), vec![1, 4]).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
        let b = t.constant(shifted, vec![1, 4]).unwrap();
        let sa = t.softmax(a).unwrap();
        let sb = t.softmax(b).unwrap();
        let sa = t.value(sa).to_vec();
        assert_close(&sa, t.value(sb), 1e-12, "shift invariance");
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![1000.0, 0.0], vec![1, 2]).unwrap();
        let s = t.softmax(x).unwrap();
        assert_close(t.value(s), &[1.0, 0.0], 1e-12, "extreme softmax");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Prng::new(3, crate::rng::stream::INIT);
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(rng.normal_vec(5 * 7), vec![5, 7]).unwrap();
        let s = t.softmax(x).unwrap();
        for r in 0..5 {
            let sum: f64 = t.value(s)[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    // ── layer norm ──

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![3.0; 4], vec![1, 4]).unwrap();
        let g = t.constant(vec![1.0; 4], vec![4]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        assert_close(t.value(y), &[0.0; 4], 1e-12, "constant row");
    }

    #[test]
    fn layer_norm_unit_pair_stays_put() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let g = t.constant(vec![1.0; 2], vec![2]).unwrap();
        let b = t.constant(vec![0.0; 2], vec![2]).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        assert_close(t.value(y), &[1.0, -1.0], 1e-4, "already normalized");
    }

    #[test]
    fn layer_norm_shift_invariant() {
        let base = [0.4, -2.0, 1.1, 0.0, 5.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 42.0).collect();
        let mut t: Tape<f64> = Tape::new();
        let g = t.constant(vec![1.5, 0.5, 2.0, 1.0, 0.1], vec![5]).unwrap();
        let b = t.constant(vec![0.1; 5], vec![5]).unwrap();
        let x0 = t.constant(base.to_vec(), vec![1, 5]).unwrap();
        let x1 = t.constant(shifted, vec![1, 5]).unwrap();
        let y0 = t.layer_norm(x0, g, b).unwrap();
        let y1 = t.layer_norm(x1, g, b).unwrap();
        let y0 = t.value(y0).to_vec();
        assert_close(&y0, t.value(y1), 1e-9, "shift invariance");
    }

    // ── gelu ──

    #[test]
    fn gelu_fixed_points() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![0.0, 10.0, 1.0], vec![3]).unwrap();
        let y = t.gelu(x).unwrap();
        let expect_1 = 0.5 * (1.0 + libm::erf(1.0 / libm::sqrt(2.0)));
        assert!((t.value(y)[0]).abs() < 1e-15, "gelu(0)");
        assert!((t.value(y)[1] - 10.0).abs() < 1e-6, "gelu(10) ≈ 10");
        assert!((t.value(y)[2] - expect_1).abs() < 1e-12, "gelu(1)");
    }

    // ── structure ──

    #[test]
    fn transpose_round_trip() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant((0..6).map(|v| v as f64).collect(), vec![2, 3]).unwrap();
        let xt = t.transpose2d(x).unwrap();
        assert_eq!(t.shape(xt), &[3, 2]);
        assert_eq!(t.value(xt), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let back = t.transpose2d(xt).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], vec![1, 2]).unwrap();
        let rows = t.concat(a, b, 0).unwrap();
        assert_eq!(t.shape(rows), &[2, 2]);
        assert_eq!(t.value(rows), &[1.0, 2.0, 3.0, 4.0]);
        let cols = t.concat(a, b, 1).unwrap();
        assert_eq!(t.shape(cols), &[1, 4]);
        assert_eq!(t.value(cols), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_duplicates_and_backward_accumulates() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![2.0, 5.0], vec![2], true).unwrap();
        let y = t.gather(x, vec![0, 0, 1], vec![3]).unwrap();
        assert_eq!(t.value(y), &[2.0, 2.0, 5.0]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        // Index 0 appears twice, so its grad is 2.
        assert_eq!(t.grad(x).unwrap(), &[2.0, 1.0]);
    }

    // ── backward ──

    #[test]
    fn backward_sum_of_matmul_broadcasts_input() {
        // loss = sum(W·x) ⇒ ∂loss/∂W[i][j] = x[j].
        let mut t: Tape<f64> = Tape::new();
        let w = t.leaf(vec![0.5, -1.0, 2.0, 0.0], vec![2, 2], true).unwrap();
        let x = t.constant(vec![3.0, 7.0], vec![2, 1]).unwrap();
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        assert_close(t.grad(w).unwrap(), &[3.0, 7.0, 3.0, 7.0], 1e-12, "dW");
    }

    #[test]
    fn backward_quadratic() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.5, -2.0, 0.0], vec![3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_close(t.grad(x).unwrap(), &[3.0, -4.0, 0.0], 1e-12, "2x");
    }

    #[test]
    fn backward_composite_matches_finite_differences() {
        // Weighted softmax output; a plain mean would be constant in x.
        let build = |tape: &mut Tape<f64>, x: &[f64]| -> Var {
            let xv = tape.leaf(x.to_vec(), vec![1, 4], true).unwrap();
            let w1 = tape
                .constant(vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.6, -0.1, 0.9, 0.0, -0.5], vec![4, 3])
                .unwrap();
            let h = tape.matmul(xv, w1).unwrap();
            let h = tape.gelu(h).unwrap();
            let g = tape.constant(vec![1.0; 3], vec![3]).unwrap();
            let b = tape.constant(vec![0.0; 3], vec![3]).unwrap();
            let h = tape.layer_norm(h, g, b).unwrap();
            let s = tape.softmax(h).unwrap();
            let w2 = tape.constant(vec![0.9, -1.7, 0.4], vec![1, 3]).unwrap();
            let p = tape.mul(s, w2).unwrap();
            tape.sum_all(p).unwrap()
        };
        let x0 = [0.2, -1.0, 0.7, 0.05];
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        tape.backward(loss).unwrap();
        let xv = Var(0);
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = numeric_grad(build, &x0, 1e-5);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
            assert!(rel < 1e-6, "entry {i}: analytic {a}, numeric {n}, rel {rel}");
        }
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![2.0], vec![1], true).unwrap();
        let y = t.mul(x, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_close(t.grad(x).unwrap(), &[8.0], 1e-12, "two passes double");
        t.zero_grads();
        t.backward(loss).unwrap();
        assert_close(t.grad(x).unwrap(), &[4.0], 1e-12, "after reset");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let build = |tape: &mut Tape<f64>, x: &[f64]| -> Var {
            let xv = tape.leaf(x.to_vec(), vec![2, 3], true).unwrap();
            let g = tape.constant(vec![1.3, 0.7, -0.5], vec![3]).unwrap();
            let b = tape.constant(vec![0.2, 0.0, -0.1], vec![3]).unwrap();
            let y = tape.layer_norm(xv, g, b).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.mean_all(sq).unwrap()
        };
        let x0 = [0.5, -0.3, 0.9, 2.0, -1.0, 0.1];
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.to_vec(), vec![2, 3], true).unwrap();
        let g = tape.constant(vec![1.3, 0.7, -0.5], vec![3]).unwrap();
        let b = tape.constant(vec![0.2, 0.0, -0.1], vec![3]).unwrap();
        let y = tape.layer_norm(xv, g, b).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = numeric_grad(build, &x0, 1e-5);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
            assert!(rel < 1e-6, "entry {i}: analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn l2_normalize_rows_and_backward() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![3.0, 4.0], vec![1, 2], true).unwrap();
        let y = t.l2_normalize_rows(x).unwrap();
        assert_close(t.value(y), &[0.6, 0.8], 1e-9, "unit norm");

        let build = |tape: &mut Tape<f64>, x: &[f64]| -> Var {
            let xv = tape.leaf(x.to_vec(), vec![1, 2], true).unwrap();
            let y = tape.l2_normalize_rows(xv).unwrap();
            let w = tape.constant(vec![0.3, -0.9], vec![1, 2]).unwrap();
            let p = tape.mul(y, w).unwrap();
            tape.sum_all(p).unwrap()
        };
        let x0 = [3.0, 4.0];
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.to_vec(), vec![1, 2], true).unwrap();
        let y = tape.l2_normalize_rows(xv).unwrap();
        let w = tape.constant(vec![0.3, -0.9], vec![1, 2]).unwrap();
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = numeric_grad(build, &x0, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
            assert!(rel < 1e-6, "analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let mut t: Tape<f64> = Tape::new();
        let logits = vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let x = t.leaf(logits.clone(), vec![2, 3], true).unwrap();
        let loss = t.cross_entropy_logits(x, vec![1, 2]).unwrap();
        let mut expect = 0.0;
        for (r, &tgt) in [1usize, 2].iter().enumerate() {
            let row = &logits[r * 3..(r + 1) * 3];
            let z: f64 = row.iter().map(|v| libm::exp(*v)).sum();
            expect += -(row[tgt] - libm::log(z));
        }
        expect /= 2.0;
        assert!((t.value(loss)[0] - expect).abs() < 1e-12);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        // Gradient rows sum to zero: softmax minus one-hot.
        for r in 0..2 {
            let s: f64 = g[r * 3..(r + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-12, "row {r} grad sum {s}");
        }
    }

    // ── contracts ──

    #[test]
    fn identical_graphs_are_bit_identical() {
        let run = || -> (Vec<u64>, Vec<u64>) {
            let mut rng = crate::rng::Prng::new(99, crate::rng::stream::INIT);
            let mut t: Tape<f64> = Tape::new();
            let x = t.leaf(rng.normal_vec(12), vec![3, 4], true).unwrap();
            let w = t.constant(rng.normal_vec(12), vec![4, 3]).unwrap();
            let y = t.matmul(x, w).unwrap();
            let y = t.gelu(y).unwrap();
            let s = t.softmax(y).unwrap();
            let loss = t.mean_all(s).unwrap();
            t.backward(loss).unwrap();
            (
                t.value(s).iter().map(|v| v.to_bits()).collect(),
                t.grad(x).unwrap().iter().map(|v| v.to_bits()).collect(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut t: Tape<f64> = Tape::new();
        assert!(matches!(
            t.leaf(vec![f64::INFINITY], vec![1], false),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn non_finite_op_output_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![1e200], vec![1]).unwrap();
        let b = t.constant(vec![1e200], vec![1]).unwrap();
        assert!(matches!(t.mul(a, b), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar { .. })));
    }
}
