//! Graph encoder for scene graphs. Each layer runs every (subject, predicate,
//! object) triple through one shared MLP, splits the result into subject /
//! relation / object segments, and pools a node's segments from all its
//! incidences by arithmetic mean. Nodes touching no edge fall back to a
//! learned linear map.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::{embed_rows, slice_cols, Linear, Mlp};
use crate::params::{ParamStore, Session};
use crate::rng::Prng;
use crate::scenegraph::SceneGraph;
use crate::tensor::{Result, TensorError, Var};
use crate::Element;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConvConfig {
    pub d: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl GraphConvConfig {
    pub fn desk() -> Self {
        GraphConvConfig { d: 64, hidden: 128, layers: 2 }
    }
}

pub struct GraphConvLayer {
    mlp: Mlp,
    iso: Linear,
    d_in: usize,
    d_out: usize,
}

impl GraphConvLayer {
    pub fn new(path: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        GraphConvLayer {
            mlp: Mlp::new(&alloc::format!("{path}.mlp"), 3 * d_in, hidden, 3 * d_out),
            iso: Linear::new(&alloc::format!("{path}.iso"), d_in, d_out, true),
            d_in,
            d_out,
        }
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.mlp.register(store, rng)?;
        self.iso.register(store, rng)
    }

    /// `nodes: [n, d_in]`, `edges: [m, d_in]` aligned with `pairs`, the
    /// (subject, object) index pairs. Returns updated node and edge states.
    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        nodes: Var,
        edges: Option<Var>,
        pairs: &[(usize, usize)],
    ) -> Result<(Var, Option<Var>)> {
        let n = sess.tape.shape(nodes)[0];
        let m = pairs.len();
        match edges {
            None if m == 0 => {
                let out = self.iso.forward(sess, nodes)?;
                return Ok((out, None));
            }
            None => {
                return Err(TensorError::BadArgument {
                    op: "graphconv",
                    message: alloc::format!("{m} pairs but no edge states"),
                })
            }
            Some(e) => {
                let es = sess.tape.shape(e);
                if es[0] != m {
                    return Err(TensorError::BadArgument {
                        op: "graphconv",
                        message: alloc::format!("{} edge states for {m} pairs", es[0]),
                    });
                }
            }
        }
        let edges = edges.expect("edge states present");
        for &(s, o) in pairs {
            if s >= n || o >= n {
                return Err(TensorError::BadIndex {
                    op: "graphconv",
                    index: s.max(o),
                    bound: n,
                });
            }
        }
        let d = self.d_in;

        // Rows: n node states then m edge states.
        let combined = sess.tape.concat(nodes, edges, 0)?;
        let mut idx = Vec::with_capacity(m * 3 * d);
        for (t, &(s, o)) in pairs.iter().enumerate() {
            for row in [s, n + t, o] {
                idx.extend((0..d).map(|c| row * d + c));
            }
        }
        let triples = sess.tape.gather(combined, idx, alloc::vec![m, 3 * d])?;

        let fused = self.mlp.forward(sess, triples)?;
        let v_subj = slice_cols(sess, fused, 0, self.d_out)?;
        let v_rel = slice_cols(sess, fused, self.d_out, 2 * self.d_out)?;
        let v_obj = slice_cols(sess, fused, 2 * self.d_out, 3 * self.d_out)?;

        let mut count = alloc::vec![0usize; n];
        for &(s, o) in pairs {
            count[s] += 1;
            count[o] += 1;
        }

        // Mean pool over each node's subject and object segments.
        let mut pool = alloc::vec![0.0f64; n * 2 * m];
        for (t, &(s, o)) in pairs.iter().enumerate() {
            pool[s * 2 * m + t] += 1.0 / count[s] as f64;
            pool[o * 2 * m + m + t] += 1.0 / count[o] as f64;
        }
        let pool = sess.constant_f64(&pool, alloc::vec![n, 2 * m])?;
        let stacked = sess.tape.concat(v_subj, v_obj, 0)?;
        let pooled = sess.tape.matmul(pool, stacked)?;

        // Untouched nodes keep a learned projection of their own state.
        let iso_out = self.iso.forward(sess, nodes)?;
        let gate: Vec<f64> = count
            .iter()
            .flat_map(|&c| core::iter::repeat(if c == 0 { 1.0 } else { 0.0 }).take(self.d_out))
            .collect();
        let gate = sess.constant_f64(&gate, alloc::vec![n, self.d_out])?;
        let iso_masked = sess.tape.mul(iso_out, gate)?;
        let nodes_out = sess.tape.add(pooled, iso_masked)?;
        Ok((nodes_out, Some(v_rel)))
    }
}

/// Encoded graph: per-object and per-relation state sequences.
pub struct GraphEncoding {
    pub nodes: Var,
    pub edges: Option<Var>,
}

pub struct GraphEncoder {
    cfg: GraphConvConfig,
    cat_path: String,
    attr_path: String,
    pred_path: String,
    layers: Vec<GraphConvLayer>,
}

impl GraphEncoder {
    pub fn new(path: &str, cfg: GraphConvConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| GraphConvLayer::new(&alloc::format!("{path}.l{i}"), cfg.d, cfg.hidden, cfg.d))
            .collect();
        GraphEncoder {
            cfg,
            cat_path: alloc::format!("{path}.cat"),
            attr_path: alloc::format!("{path}.attr"),
            pred_path: alloc::format!("{path}.pred"),
            layers,
        }
    }

    pub fn config(&self) -> GraphConvConfig {
        self.cfg
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        store.add_normal(rng, &self.cat_path, alloc::vec![3, self.cfg.d], 0.02)?;
        store.add_normal(rng, &self.attr_path, alloc::vec![3, self.cfg.d], 0.02)?;
        store.add_normal(rng, &self.pred_path, alloc::vec![4, self.cfg.d], 0.02)?;
        for layer in &self.layers {
            layer.register(store, rng)?;
        }
        Ok(())
    }

    /// Initial states: object = category row + attribute row, relation =
    /// predicate row.
    pub fn init_states<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        graph: &SceneGraph,
    ) -> Result<(Var, Option<Var>)> {
        let cat = sess.param(&self.cat_path)?;
        let attr = sess.param(&self.attr_path)?;
        let shape_ids: Vec<usize> = graph.objects.iter().map(|o| o.shape.index()).collect();
        let color_ids: Vec<usize> = graph.objects.iter().map(|o| o.color.index()).collect();
        let cat_rows = embed_rows(sess, cat, &shape_ids)?;
        let attr_rows = embed_rows(sess, attr, &color_ids)?;
        let nodes = sess.tape.add(cat_rows, attr_rows)?;
        let edges = if graph.edges.is_empty() {
            None
        } else {
            let pred = sess.param(&self.pred_path)?;
            let pred_ids: Vec<usize> = graph.edges.iter().map(|e| e.predicate.index()).collect();
            Some(embed_rows(sess, pred, &pred_ids)?)
        };
        Ok((nodes, edges))
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<'_, E>,
        graph: &SceneGraph,
    ) -> Result<GraphEncoding> {
        graph.validate().map_err(|e| TensorError::BadArgument {
            op: "graphconv",
            message: alloc::format!("{e}"),
        })?;
        let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.subject, e.object)).collect();
        let (mut nodes, mut edges) = self.init_states(sess, graph)?;
        for layer in &self.layers {
            let (n2, e2) = layer.forward(sess, nodes, edges, &pairs)?;
            nodes = n2;
            edges = e2;
        }
        Ok(GraphEncoding { nodes, edges })
    }
}
