//! Run configuration: one JSON document drives data generation, training,
//! sampling, evaluation, and the ablation harness.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdiff_core::diffusion;
use sgdiff_core::unet::UNetConfig;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (created by `generate-data`, read by everything else).
    pub dataset: PathBuf,
    /// Where checkpoints, logs, samples, and reports land.
    pub out_dir: PathBuf,
    /// Master run seed: initialization, batch order, noise draws, sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Cascade stages in resolution order; training follows this order.
    pub stages: Vec<StageConfig>,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub flags: AblationFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Trailing fraction of the dataset held out from training.
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_text: usize,
    pub d_graph: usize,
    pub d_cond: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_len: usize,
    pub graph_hidden: usize,
    pub graph_layers: usize,
    /// Freeze the text encoder during diffusion training.
    pub freeze_text: bool,
    /// Freeze the graph encoder during diffusion training.
    pub freeze_graph: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub resolution: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub merges: usize,
    pub num_block: usize,
    pub heads: usize,
    #[serde(default)]
    pub predict_x0: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub sample_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Optimizer steps spent on each stage in turn.
    pub steps_per_stage: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Feed graph node/relation embeddings into the conditioning sequence.
    pub use_scene_graph: bool,
    /// Windowed attention; off swaps in one full-grid window per stage.
    pub use_swin_unet: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_samples: 256,
            seed: 1,
            holdout_fraction: 0.2,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_text: 48,
            d_graph: 48,
            d_cond: 48,
            text_layers: 2,
            text_heads: 4,
            max_len: 16,
            graph_hidden: 96,
            graph_layers: 2,
            freeze_text: false,
            freeze_graph: false,
        }
    }
}

impl ScheduleConfig {
    /// Reference ramp. At T = 200 its terminal alpha-bar is 0.13, so the
    /// most-noised training input still holds a third of the image
    /// amplitude; sampling nonetheless starts from a unit Gaussian, and at
    /// this scale measured sample quality matches [`Self::noise_terminal`].
    pub fn reference() -> Self {
        ScheduleConfig {
            train_steps: diffusion::TRAIN_STEPS,
            sample_steps: diffusion::SAMPLE_STEPS,
            beta_start: diffusion::BETA_START,
            beta_end: diffusion::BETA_END,
        }
    }

    /// Ramp rescaled 5x so the terminal alpha-bar reaches noise level
    /// (~3e-5) within T = 200 steps, matching the unit-Gaussian prior that
    /// sampling starts from. The harder terminal slows conditional
    /// memorization, so short training budgets favor the reference ramp.
    pub fn noise_terminal() -> Self {
        ScheduleConfig {
            beta_start: 5.0e-4,
            beta_end: 0.1,
            ..ScheduleConfig::reference()
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::reference()
    }
}

impl OptimConfig {
    /// Full-scale published defaults; far beyond a desk run.
    pub fn full_scale() -> Self {
        OptimConfig {
            lr: 1e-4,
            warmup_steps: 10_000,
            batch_size: 8,
            steps_per_stage: 125_000,
        }
    }

    /// Desk-scale profile tuned for CPU minutes.
    pub fn desk() -> Self {
        OptimConfig {
            lr: 2e-3,
            warmup_steps: 100,
            batch_size: 4,
            steps_per_stage: 2000,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::desk()
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_scene_graph: true,
            use_swin_unet: true,
        }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        format!(
            "attention: {}, graph: {}",
            if self.use_swin_unet { "windowed" } else { "full" },
            if self.use_scene_graph { "on" } else { "off" }
        )
    }
}

impl StageConfig {
    /// Desk ladder: 8 -> 16 -> 32 px. All stages regress the clean
    /// image; direct targets keep small-step losses well scaled at
    /// desk model sizes.
    pub fn desk_ladder() -> Vec<StageConfig> {
        vec![
            StageConfig {
                resolution: 8,
                patch: 1,
                embed_dim: 24,
                merges: 1,
                num_block: 2,
                heads: 4,
                predict_x0: true,
            },
            StageConfig {
                resolution: 16,
                patch: 1,
                embed_dim: 24,
                merges: 2,
                num_block: 2,
                heads: 4,
                predict_x0: true,
            },
            StageConfig {
                resolution: 32,
                patch: 2,
                embed_dim: 24,
                merges: 2,
                num_block: 2,
                heads: 4,
                predict_x0: true,
            },
        ]
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("dataset"),
            out_dir: PathBuf::from("out"),
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stages: StageConfig::desk_ladder(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            flags: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    /// The network description of stage `i`, with channel layout derived
    /// from its place in the cascade.
    pub fn unet_config(&self, i: usize) -> UNetConfig {
        let s = &self.stages[i];
        let c = if i == 0 { 3 } else { 6 };
        UNetConfig {
            resolution: s.resolution,
            patch: s.patch,
            c_in: c,
            c_out: 3,
            embed_dim: s.embed_dim,
            merges: s.merges,
            num_block: s.num_block,
            heads: s.heads,
            d_cond: self.model.d_cond,
            t_max: self.schedule.train_steps,
            predict_x0: s.predict_x0,
            full_attention: !self.flags.use_swin_unet,
        }
    }

    /// Structural checks that need no filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(AppError::Config("at least one stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            self.unet_config(i)
                .validate()
                .map_err(|e| AppError::Config(format!("stage {}: {}", i, e)))?;
            if i > 0 {
                let prev = self.stages[i - 1].resolution;
                if s.resolution <= prev || s.resolution % prev != 0 {
                    return Err(AppError::Config(format!(
                        "stage {} resolution {} does not upscale {}",
                        i, s.resolution, prev
                    )));
                }
            }
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(AppError::Config("holdout_fraction must be in (0, 1)".into()));
        }
        if self.optim.batch_size == 0 || self.optim.steps_per_stage == 0 {
            return Err(AppError::Config("optimizer needs batch_size and steps".into()));
        }
        if self.schedule.sample_steps == 0
            || self.schedule.sample_steps > self.schedule.train_steps
        {
            return Err(AppError::Config(
                "sample_steps must be in 1..=train_steps".into(),
            ));
        }
        Ok(())
    }

    /// Checks required before commands that read the dataset.
    pub fn require_dataset(&self) -> Result<()> {
        if !self.dataset.is_dir() {
            return Err(AppError::Config(format!(
                "dataset directory {} does not exist; run generate-data first",
                self.dataset.display()
            )));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| AppError::Config(format!("{}: {}", path.display(), e)))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| AppError::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
