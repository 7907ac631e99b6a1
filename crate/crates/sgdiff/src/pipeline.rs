//! Model assembly: the text encoder, the graph encoder, and the cascade
//! stages, wired from a `RunConfig` into one parameter store.

use sgdiff_core::graphconv::{GraphConvConfig, GraphEncoder, GraphEncoding};
use sgdiff_core::rng::{stream, Prng};
use sgdiff_core::scenegraph::SceneGraph;
use sgdiff_core::textenc::{TextEncoder, TextEncoderConfig, Vocabulary};
use sgdiff_core::unet::{ConditionalEmbeddings, UNetModel};
use sgdiff_core::{ParamStore, Session};

use crate::config::RunConfig;
use crate::error::{AppError, Result};

pub struct Pipeline {
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub graph: GraphEncoder,
    pub stages: Vec<UNetModel>,
    pub max_len: usize,
    pub use_scene_graph: bool,
}

impl Pipeline {
    pub fn build(cfg: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        let text = TextEncoder::new(
            "text",
            TextEncoderConfig {
                vocab_size: vocab.len(),
                d_text: cfg.model.d_text,
                layers: cfg.model.text_layers,
                heads: cfg.model.text_heads,
                max_len: cfg.model.max_len,
            },
        )
        .map_err(AppError::Math)?;
        let graph = GraphEncoder::new(
            "graph",
            GraphConvConfig {
                d: cfg.model.d_graph,
                hidden: cfg.model.graph_hidden,
                layers: cfg.model.graph_layers,
            },
        );
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for i in 0..cfg.stages.len() {
            stages.push(
                UNetModel::new(
                    &format!("stage{}", i),
                    cfg.unet_config(i),
                    cfg.model.d_text,
                    cfg.model.d_graph,
                )
                .map_err(AppError::Math)?,
            );
        }
        Ok(Pipeline {
            vocab,
            text,
            graph,
            stages,
            max_len: cfg.model.max_len,
            use_scene_graph: cfg.flags.use_scene_graph,
        })
    }

    /// Fresh parameters drawn from the run seed.
    pub fn init_store(&self, seed: u64) -> Result<ParamStore<f64>> {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(seed, stream::INIT);
        self.text
            .register(&mut store, &mut rng)
            .map_err(AppError::Math)?;
        self.graph
            .register(&mut store, &mut rng)
            .map_err(AppError::Math)?;
        for s in &self.stages {
            s.register(&mut store, &mut rng).map_err(AppError::Math)?;
        }
        Ok(store)
    }

    /// Conditioning for one caption inside an open session. The graph is
    /// omitted (masking its segments) when scene-graph use is off.
    pub fn build_cond(
        &self,
        sess: &mut Session<'_, f64>,
        model: &UNetModel,
        caption: &str,
        graph: Option<&SceneGraph>,
    ) -> Result<ConditionalEmbeddings> {
        let ids = self.vocab.encode_padded(caption, self.max_len);
        let enc = self.text.forward(sess, &ids).map_err(AppError::Math)?;
        let genc: Option<GraphEncoding> = match (self.use_scene_graph, graph) {
            (true, Some(g)) => Some(self.graph.forward(sess, g).map_err(AppError::Math)?),
            _ => None,
        };
        model
            .conditioner()
            .build(sess, &enc, genc.as_ref())
            .map_err(AppError::Math)
    }

    /// Closure form used by the cascade sampler.
    pub fn cond_builder<'c>(
        &'c self,
        caption: &'c str,
        graph: Option<&'c SceneGraph>,
    ) -> impl Fn(
        &mut Session<'_, f64>,
        &UNetModel,
    ) -> sgdiff_core::tensor::Result<ConditionalEmbeddings>
           + 'c {
        move |sess, model| {
            let ids = self.vocab.encode_padded(caption, self.max_len);
            let enc = self.text.forward(sess, &ids)?;
            let genc: Option<GraphEncoding> = match (self.use_scene_graph, graph) {
                (true, Some(g)) => Some(self.graph.forward(sess, g)?),
                _ => None,
            };
            model.conditioner().build(sess, &enc, genc.as_ref())
        }
    }
}

/// Total scalar parameter count of a store.
pub fn param_count(store: &ParamStore<f64>) -> usize {
    store.iter().map(|(_, p)| p.data.len()).sum()
}
