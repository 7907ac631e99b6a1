//! Dataset directory format: a PNG resolution ladder per sample plus a
//! JSON manifest carrying captions, graph documents, and ladder paths,
//! and the token vocabulary used to encode the captions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdiff_core::datagen;
use sgdiff_core::scenegraph::{load_scene_graph, serialize_scene_graph, SceneGraph};
use sgdiff_core::textenc::Vocabulary;

use crate::error::{AppError, Result};
use crate::png;

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderPaths {
    pub r8: String,
    pub r16: String,
    pub r32: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub caption: String,
    pub label: usize,
    /// Graph document as structured JSON, not an escaped string.
    pub graph: serde_json::Value,
    pub images: LadderPaths,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub items: Vec<ManifestItem>,
}

/// Generates `n` samples and writes the directory layout.
pub fn write_dataset(dir: &Path, seed: u64, n: usize) -> Result<DatasetManifest> {
    let samples = datagen::generate(seed, n).map_err(|e| AppError::Data(e.to_string()))?;
    fs::create_dir_all(dir.join("img"))?;
    let mut items = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let paths = LadderPaths {
            r8: format!("img/{:05}_r8.png", i),
            r16: format!("img/{:05}_r16.png", i),
            r32: format!("img/{:05}_r32.png", i),
        };
        png::write(&dir.join(&paths.r8), &s.image8, 8)?;
        png::write(&dir.join(&paths.r16), &s.image16, 16)?;
        png::write(&dir.join(&paths.r32), &s.image32, 32)?;
        let doc = serialize_scene_graph(&s.graph);
        let graph: serde_json::Value =
            serde_json::from_str(&doc).map_err(|e| AppError::Data(e.to_string()))?;
        items.push(ManifestItem {
            caption: s.caption.clone(),
            label: s.label,
            graph,
            images: paths,
        });
    }
    let manifest = DatasetManifest { seed, n, items };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| AppError::Data(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    fs::write(dir.join(VOCAB), Vocabulary::world().to_lines())?;
    Ok(manifest)
}

/// One loaded entry with the full ladder in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub caption: String,
    pub label: usize,
    pub graph: SceneGraph,
    pub image8: Vec<f64>,
    pub image16: Vec<f64>,
    pub image32: Vec<f64>,
}

impl LoadedSample {
    /// The clean image at a stage resolution.
    pub fn at_resolution(&self, res: usize) -> Result<&[f64]> {
        match res {
            8 => Ok(&self.image8),
            16 => Ok(&self.image16),
            32 => Ok(&self.image32),
            _ => Err(AppError::Data(format!("no ladder rung at {} px", res))),
        }
    }
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub samples: Vec<LoadedSample>,
}

impl LoadedDataset {
    /// Deterministic split: the trailing fraction is held out.
    pub fn split(&self, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.samples.len();
        let held = ((n as f64 * holdout_fraction) as usize).clamp(1, n.saturating_sub(1).max(1));
        let cut = n - held;
        ((0..cut).collect(), (cut..n).collect())
    }
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| AppError::Data(format!("{}: {}", dir.join(MANIFEST).display(), e)))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| AppError::Data(e.to_string()))?;
    let vocab_text = fs::read_to_string(dir.join(VOCAB))
        .map_err(|e| AppError::Data(format!("{}: {}", dir.join(VOCAB).display(), e)))?;
    let vocab =
        Vocabulary::from_lines(&vocab_text).map_err(|e| AppError::Data(format!("{:?}", e)))?;
    let mut samples = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let doc = serde_json::to_string(&item.graph).map_err(|e| AppError::Data(e.to_string()))?;
        let graph = load_scene_graph(&doc).map_err(|e| AppError::Data(e.to_string()))?;
        let load = |rel: &str, want: usize| -> Result<Vec<f64>> {
            let (img, res) = png::read(&dir.join(rel))?;
            if res != want {
                return Err(AppError::Data(format!(
                    "{} is {} px, expected {}",
                    rel, res, want
                )));
            }
            Ok(img)
        };
        samples.push(LoadedSample {
            caption: item.caption.clone(),
            label: item.label,
            graph,
            image8: load(&item.images.r8, 8)?,
            image16: load(&item.images.r16, 16)?,
            image32: load(&item.images.r32, 32)?,
        });
    }
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        manifest,
        vocab,
        samples,
    })
}

/// A sample count guard shared by evaluation entry points.
pub fn require_samples(have: usize, need: usize, what: &str) -> Result<()> {
    if have < need {
        return Err(AppError::Data(format!(
            "{} needs at least {} samples, found {}",
            what, need, have
        )));
    }
    Ok(())
}
