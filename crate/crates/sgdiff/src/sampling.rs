//! Caption-conditioned cascade sampling: PNGs at every ladder resolution
//! plus a manifest recording seed, caption, and per-stage files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgdiff_core::diffusion::{self, NoiseSchedule};
use sgdiff_core::rng::{stream, Prng};
use sgdiff_core::scenegraph::parse_caption;
use sgdiff_core::textenc::Vocabulary;
use sgdiff_core::ParamStore;

use crate::config::RunConfig;
use crate::dataset::VOCAB;
use crate::error::{AppError, Result};
use crate::pipeline::Pipeline;
use crate::png;

pub const SAMPLES_MANIFEST: &str = "samples.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFile {
    pub stage: usize,
    pub resolution: usize,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub caption: String,
    pub ok: bool,
    pub error: Option<String>,
    pub files: Vec<StageFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub entries: Vec<SampleEntry>,
}

/// The token table sampling must share with training: the dataset's
/// persisted vocabulary when present, the closed world list otherwise.
pub fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.dataset.join(VOCAB);
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        Vocabulary::from_lines(&text).map_err(|e| AppError::Data(format!("{:?}", e)))
    } else {
        Ok(Vocabulary::world())
    }
}

/// Samples the full cascade once per caption. A caption that fails to
/// parse is recorded in the manifest and skipped; the run continues.
/// With scene-graph conditioning off, captions are not parsed at all.
pub fn sample_captions(
    cfg: &RunConfig,
    store: &ParamStore<f64>,
    captions: &[String],
    out_dir: &Path,
) -> Result<SampleManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let pipe = Pipeline::build(cfg, load_vocab(cfg)?)?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.train_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .map_err(AppError::Math)?;
    let stage_pairs: Vec<_> = pipe.stages.iter().map(|m| (m, &sched)).collect();

    let mut entries = Vec::with_capacity(captions.len());
    for (i, caption) in captions.iter().enumerate() {
        let graph = if cfg.flags.use_scene_graph {
            match parse_caption(caption) {
                Ok(g) => Some(g),
                Err(e) => {
                    entries.push(SampleEntry {
                        index: i,
                        caption: caption.clone(),
                        ok: false,
                        error: Some(format!("{:?}", e)),
                        files: Vec::new(),
                    });
                    continue;
                }
            }
        } else {
            None
        };
        let builder = pipe.cond_builder(caption, graph.as_ref());
        let mut rng = Prng::counted(cfg.seed, stream::SAMPLE, i as u64);
        let images = diffusion::cascade_sample(
            store,
            &stage_pairs,
            cfg.schedule.sample_steps,
            &builder,
            &mut rng,
        )
        .map_err(AppError::Math)?;
        let mut files = Vec::with_capacity(images.len());
        for (s, img) in images.iter().enumerate() {
            let res = pipe.stages[s].config().resolution;
            let name = format!("sample_{:03}_r{}.png", i, res);
            png::write(&out_dir.join(&name), img, res)?;
            files.push(StageFile {
                stage: s,
                resolution: res,
                path: name,
            });
        }
        entries.push(SampleEntry {
            index: i,
            caption: caption.clone(),
            ok: true,
            error: None,
            files,
        });
    }
    let manifest = SampleManifest {
        seed: cfg.seed,
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AppError::Data(e.to_string()))?;
    fs::write(out_dir.join(SAMPLES_MANIFEST), text + "\n")?;
    Ok(manifest)
}

/// Reads a captions file: one caption per line, blank lines skipped.
pub fn read_captions(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let captions: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if captions.is_empty() {
        return Err(AppError::Caption(format!(
            "no captions in {}",
            path.display()
        )));
    }
    Ok(captions)
}
