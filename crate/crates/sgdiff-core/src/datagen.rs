//! Synthetic captioned-scene dataset: colored shapes on a 2x2 layout grid,
//! rasterized with supersampled edges so every caption fully determines
//! its image and relation words stay geometrically checkable.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::{stream, Prng};
use crate::scenegraph::{
    caption_for, Color, Relation, SceneEdge, SceneGraph, SceneObject, Shape,
};
use crate::tensor::{Result, TensorError};

/// Rendered resolution of the top rung of the ladder.
pub const IMG_RES: usize = 32;
/// Layout cells per side.
pub const GRID: usize = 2;
/// Most objects a scene may hold.
pub const MAX_OBJECTS: usize = 3;
/// Subpixel samples per axis when rasterizing.
const SUPERSAMPLE: usize = 4;
/// Signal values per color channel, indexed by `Color::index`.
/// Background sits at -1 on every channel.
pub const COLOR_VALUES: [[f64; 3]; 3] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
];
/// Evaluation label space: first object's shape and color crossed with
/// the first relation (or its absence).
pub const NUM_CLASSES: usize = 3 * 3 * (1 + 4);

fn bad(msg: String) -> TensorError {
    TensorError::BadArgument {
        op: "datagen",
        message: msg,
    }
}

// ── scene layout ──

/// A scene pinned to grid cells: objects with `(row, col)` positions plus
/// the relations the caption will assert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<(SceneObject, (usize, usize))>,
    pub edges: Vec<SceneEdge>,
}

/// Whether a relation word is true of two grid positions. Horizontal
/// words compare columns strictly, vertical words compare rows strictly.
pub fn relation_holds(pred: Relation, s: (usize, usize), o: (usize, usize)) -> bool {
    match pred {
        Relation::LeftOf => s.1 < o.1,
        Relation::RightOf => s.1 > o.1,
        Relation::Above => s.0 < o.0,
        Relation::Below => s.0 > o.0,
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(bad(alloc::format!(
                "scene must hold 1..={} objects, got {}",
                MAX_OBJECTS,
                self.objects.len()
            )));
        }
        for (i, (_, pos)) in self.objects.iter().enumerate() {
            if pos.0 >= GRID || pos.1 >= GRID {
                return Err(bad(alloc::format!("object {} is off the grid", i)));
            }
            for (j, (_, other)) in self.objects.iter().enumerate().skip(i + 1) {
                if pos == other {
                    return Err(bad(alloc::format!(
                        "objects {} and {} share a cell",
                        i,
                        j
                    )));
                }
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.subject >= self.objects.len() || e.object >= self.objects.len() {
                return Err(bad(alloc::format!("edge {} references a missing object", k)));
            }
            if !relation_holds(
                e.predicate,
                self.objects[e.subject].1,
                self.objects[e.object].1,
            ) {
                return Err(bad(alloc::format!(
                    "edge {} claims {} but the layout disagrees",
                    k,
                    e.predicate.name()
                )));
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> SceneGraph {
        SceneGraph {
            objects: self.objects.iter().map(|(o, _)| o.clone()).collect(),
            edges: self.edges.clone(),
        }
    }
}

/// The lexicographically first assignment of distinct grid cells that
/// satisfies every relation in the graph, or `None` when the relations
/// cannot all hold on the grid. Using a canonical assignment makes the
/// caption determine the rendered image exactly.
pub fn canonical_spec(graph: &SceneGraph) -> Option<SceneSpec> {
    let k = graph.objects.len();
    if k == 0 || k > MAX_OBJECTS {
        return None;
    }
    let cells = GRID * GRID;
    let mut pick = alloc::vec![0usize; k];
    let mut used = alloc::vec![false; cells];
    fn search(
        depth: usize,
        k: usize,
        cells: usize,
        graph: &SceneGraph,
        pick: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if depth == k {
            return true;
        }
        for cell in 0..cells {
            if used[cell] {
                continue;
            }
            pick[depth] = cell;
            let pos = |c: usize| (c / GRID, c % GRID);
            let ok = graph.edges.iter().all(|e| {
                if e.subject < depth + 1 && e.object < depth + 1 {
                    relation_holds(e.predicate, pos(pick[e.subject]), pos(pick[e.object]))
                } else {
                    true
                }
            });
            if ok {
                used[cell] = true;
                if search(depth + 1, k, cells, graph, pick, used) {
                    return true;
                }
                used[cell] = false;
            }
        }
        false
    }
    if !search(0, k, cells, graph, &mut pick, &mut used) {
        return None;
    }
    let objects = graph
        .objects
        .iter()
        .zip(&pick)
        .map(|(o, &cell)| (o.clone(), (cell / GRID, cell % GRID)))
        .collect();
    Some(SceneSpec {
        objects,
        edges: graph.edges.clone(),
    })
}

// ── rasterizer ──

fn inside(shape: Shape, dx: f64, dy: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= 36.0,
        Shape::Square => libm::fabs(dx) <= 5.0 && libm::fabs(dy) <= 5.0,
        Shape::Triangle => {
            // Upward triangle with apex (0,-6) and base corners (+-6, 6);
            // inside means on the clockwise side of all three edges.
            let ab = -6.0 * (dy + 6.0) - 12.0 * dx;
            let bc = 12.0 * (dy - 6.0);
            let ca = -6.0 * (dy - 6.0) + 12.0 * (dx - 6.0);
            ab <= 0.0 && bc <= 0.0 && ca <= 0.0
        }
    }
}

/// Deterministic raster of a scene at `IMG_RES`, row-major `[res*res, 3]`
/// in `[-1, 1]`. Shapes are centered in their cells and edge pixels carry
/// fractional coverage from `SUPERSAMPLE^2` point samples.
pub fn render(spec: &SceneSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let cell_px = IMG_RES / GRID;
    let mut img = alloc::vec![-1.0; IMG_RES * IMG_RES * 3];
    for (obj, (row, col)) in &spec.objects {
        let cx = (col * cell_px) as f64 + cell_px as f64 / 2.0;
        let cy = (row * cell_px) as f64 + cell_px as f64 / 2.0;
        let color = COLOR_VALUES[obj.color.index()];
        for pr in row * cell_px..(row + 1) * cell_px {
            for pc in col * cell_px..(col + 1) * cell_px {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = pc as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let y = pr as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        if inside(obj.shape, x - cx, y - cy) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let alpha = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let base = (pr * IMG_RES + pc) * 3;
                for ch in 0..3 {
                    img[base + ch] = -1.0 * (1.0 - alpha) + color[ch] * alpha;
                }
            }
        }
    }
    Ok(img)
}

/// 2x2 box averaging, halving the resolution. Exactly mean-preserving.
pub fn box_down(img: &[f64], res: usize, c: usize) -> Result<Vec<f64>> {
    if res % 2 != 0 || img.len() != res * res * c {
        return Err(bad("box averaging needs an even square image".into()));
    }
    let half = res / 2;
    let mut out = alloc::vec![0.0; half * half * c];
    for r in 0..half {
        for col in 0..half {
            for ch in 0..c {
                let mut acc = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        acc += img[((2 * r + dr) * res + 2 * col + dc) * c + ch];
                    }
                }
                out[(r * half + col) * c + ch] = acc / 4.0;
            }
        }
    }
    Ok(out)
}

// ── samples ──

/// One dataset entry: the resolution ladder, the caption, its graph, and
/// the evaluation class label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image32: Vec<f64>,
    pub image16: Vec<f64>,
    pub image8: Vec<f64>,
    pub caption: String,
    pub graph: SceneGraph,
    pub label: usize,
}

/// Label in `0..NUM_CLASSES`: the first object's shape and color crossed
/// with the first relation word, or the no-relation slot.
pub fn class_label(graph: &SceneGraph) -> usize {
    let first = &graph.objects[0];
    let rel = graph
        .edges
        .iter()
        .find(|e| e.subject == 0)
        .map(|e| 1 + e.predicate.index())
        .unwrap_or(0);
    (first.shape.index() * 3 + first.color.index()) * 5 + rel
}

fn chain_graph(rng: &mut Prng) -> SceneGraph {
    let k = 1 + rng.below(MAX_OBJECTS);
    let objects: Vec<SceneObject> = (0..k)
        .map(|_| SceneObject {
            shape: Shape::ALL[rng.below(3)],
            color: Color::ALL[rng.below(3)],
        })
        .collect();
    let edges = (0..k.saturating_sub(1))
        .map(|i| SceneEdge {
            subject: i,
            predicate: Relation::ALL[rng.below(4)],
            object: i + 1,
        })
        .collect();
    SceneGraph { objects, edges }
}

/// Draws one scene for dataset index `index`: chain graphs are rejected
/// until their relations fit on the grid, then rendered at the canonical
/// layout and box-averaged down the ladder.
pub fn generate_one(seed: u64, index: u64) -> Result<Sample> {
    let mut rng = Prng::counted(seed, stream::DATAGEN, index);
    loop {
        let graph = chain_graph(&mut rng);
        let Some(spec) = canonical_spec(&graph) else {
            continue;
        };
        let image32 = render(&spec)?;
        let image16 = box_down(&image32, IMG_RES, 3)?;
        let image8 = box_down(&image16, IMG_RES / 2, 3)?;
        let caption = caption_for(&graph);
        let label = class_label(&graph);
        return Ok(Sample {
            image32,
            image16,
            image8,
            caption,
            graph,
            label,
        });
    }
}

/// Deterministic dataset of `n` samples. Each index draws from its own
/// counted RNG stream, so partitions of the index range can be produced
/// independently without changing the result.
pub fn generate(seed: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(bad("dataset needs at least one sample".into()));
    }
    (0..n).map(|i| generate_one(seed, i as u64)).collect()
}

// ─────────────────────────────────────────────────────────────────────────────
