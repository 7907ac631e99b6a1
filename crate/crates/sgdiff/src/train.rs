//! Stage-by-stage training with per-step logging, best/last checkpoints,
//! and bit-exact resume.
//!
//! Every random decision at step `s` of phase `p` comes from a counted
//! RNG keyed by `(seed, stream, p << 32 | s)`, so the trajectory is a
//! pure function of the config and the checkpointed state; resuming
//! replays the identical step sequence.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdiff_core::diffusion::{self, NoiseSchedule};
use sgdiff_core::optim::{filter_grads, Adam, AdamConfig};
use sgdiff_core::rng::{stream, Prng};
use sgdiff_core::unet::UNetModel;
use sgdiff_core::{ParamStore, Session};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, LoadedDataset, LoadedSample};
use crate::error::{AppError, Result};
use crate::pipeline::Pipeline;

pub const PARAMS_FILE: &str = "params.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const STATE_FILE: &str = "state.json";
pub const LOSS_LOG: &str = "loss.jsonl";

#[derive(Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Progress marker written next to the checkpoints. RNG state needs no
/// storage: draws are re-derived from the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: usize,
    pub step: usize,
    pub best_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub stage: usize,
    pub resolution: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub phases: Vec<PhaseReport>,
    pub out_dir: PathBuf,
}

fn step_counter(phase: usize, step: usize) -> u64 {
    ((phase as u64) << 32) | step as u64
}

/// The conditioning image for a super-resolution stage: the ground-truth
/// rung below, nearest-neighbour upsampled to the stage resolution.
pub fn stage_aux(sample: &LoadedSample, res: usize) -> Result<Option<Vec<f64>>> {
    match res {
        8 => Ok(None),
        16 => Ok(Some(diffusion::upsample_nn(&sample.image8, 8, 3, 2))),
        32 => Ok(Some(diffusion::upsample_nn(&sample.image16, 16, 3, 2))),
        _ => Err(AppError::Data(format!("no ladder rung below {} px", res))),
    }
}

/// Mean denoising loss over the held-out rows with draws paired by the
/// dataset seed, so different models are scored on identical `(t, eps)`.
/// Each row is averaged over `draws` independent noise draws.
pub fn heldout_loss(
    pipe: &Pipeline,
    store: &ParamStore<f64>,
    sched: &NoiseSchedule,
    data: &LoadedDataset,
    held: &[usize],
    stage_idx: usize,
    pair_seed: u64,
    draws: usize,
) -> Result<f64> {
    let model = &pipe.stages[stage_idx];
    let res = model.config().resolution;
    let draws = draws.max(1);
    let mut acc = 0.0;
    for (j, &idx) in held.iter().enumerate() {
        let sample = &data.samples[idx];
        let x0 = sample.at_resolution(res)?;
        let aux = stage_aux(sample, res)?;
        for k in 0..draws {
            let counter = (j * draws + k) as u64;
            let mut rng = Prng::counted(pair_seed, stream::EVAL, counter);
            let (t, eps) = diffusion::sample_t_eps(&mut rng, sched, x0.len());
            let mut sess = Session::new(store);
            let cond =
                pipe.build_cond(&mut sess, model, &sample.caption, Some(&sample.graph))?;
            let loss = diffusion::training_loss(
                &mut sess,
                model,
                sched,
                x0,
                aux.as_deref(),
                &cond,
                t,
                eps.as_slice(),
            )
            .map_err(AppError::Math)?;
            acc += sess.value(loss)[0];
        }
    }
    Ok(acc / (held.len() * draws) as f64)
}

struct PhaseRunner<'a> {
    cfg: &'a RunConfig,
    pipe: &'a Pipeline,
    sched: &'a NoiseSchedule,
    data: &'a LoadedDataset,
    train_idx: &'a [usize],
    phase: usize,
}

impl<'a> PhaseRunner<'a> {
    fn model(&self) -> &UNetModel {
        &self.pipe.stages[self.phase]
    }

    /// One optimizer step; returns the mean batch loss and the lr used.
    fn step(
        &self,
        store: &mut ParamStore<f64>,
        opt: &mut Adam<f64>,
        step: usize,
    ) -> Result<(f64, f64)> {
        let model = self.model();
        let res = model.config().resolution;
        let batch = self.cfg.optim.batch_size;
        let mut rng = Prng::counted(
            self.cfg.seed,
            stream::TRAIN_STEP,
            step_counter(self.phase, step),
        );
        let mut grads_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_acc = 0.0;
        for _ in 0..batch {
            let sample = &self.data.samples[self.train_idx[rng.below(self.train_idx.len())]];
            let x0 = sample.at_resolution(res)?;
            let aux = stage_aux(sample, res)?;
            let (t, eps) = diffusion::sample_t_eps(&mut rng, self.sched, x0.len());
            let mut sess = Session::new(store);
            let cond =
                self.pipe
                    .build_cond(&mut sess, model, &sample.caption, Some(&sample.graph))?;
            let loss = diffusion::training_loss(
                &mut sess,
                model,
                self.sched,
                x0,
                aux.as_deref(),
                &cond,
                t,
                eps.as_slice(),
            )
            .map_err(AppError::Math)?;
            loss_acc += sess.value(loss)[0];
            sess.backward(loss).map_err(AppError::Math)?;
            for (path, g) in sess.grads() {
                let slot = grads_acc.entry(path).or_insert_with(|| vec![0.0; g.len()]);
                for i in 0..g.len() {
                    slot[i] += g[i];
                }
            }
        }
        let scale = 1.0 / batch as f64;
        for g in grads_acc.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        let stage_prefix = format!("stage{}.", self.phase);
        let freeze_text = self.cfg.model.freeze_text;
        let freeze_graph = self.cfg.model.freeze_graph;
        let grads = filter_grads(grads_acc, |p| {
            p.starts_with(&stage_prefix)
                || (p.starts_with("text.") && !freeze_text)
                || (p.starts_with("graph.") && !freeze_graph)
        });
        let lr = opt.step(store, &grads).map_err(AppError::Math)?;
        Ok((loss_acc * scale, lr))
    }
}

fn read_state(out: &Path) -> Result<Option<TrainState>> {
    let path = out.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let state =
        serde_json::from_str(&text).map_err(|e| AppError::Checkpoint(e.to_string()))?;
    Ok(Some(state))
}

fn write_state(out: &Path, state: &TrainState) -> Result<()> {
    let text =
        serde_json::to_string_pretty(state).map_err(|e| AppError::Checkpoint(e.to_string()))?;
    fs::write(out.join(STATE_FILE), text + "\n")?;
    Ok(())
}

fn save_all(
    out: &Path,
    store: &ParamStore<f64>,
    opt: &Adam<f64>,
    best: Option<&ParamStore<f64>>,
    state: &TrainState,
) -> Result<()> {
    checkpoint::save_store(&out.join(PARAMS_FILE), store)?;
    checkpoint::save_adam(&out.join(OPTIM_FILE), opt)?;
    if let Some(best) = best {
        checkpoint::save_store(&out.join(BEST_FILE), best)?;
    }
    write_state(out, state)
}

/// Trains every configured stage in cascade order.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    train_limited(cfg, resume, None)
}

/// Like [`train`], but stops after `limit` optimizer steps in this
/// invocation (checkpointing mid-phase), which is how a stopped run is
/// exercised without signals. `best.ckpt` always holds the lowest-loss
/// parameters of the phase in progress.
pub fn train_limited(
    cfg: &RunConfig,
    resume: bool,
    limit: Option<usize>,
) -> Result<TrainReport> {
    cfg.validate()?;
    cfg.require_dataset()?;
    let data = dataset::load_dataset(&cfg.dataset)?;
    dataset::require_samples(data.samples.len(), 2, "training")?;
    let (train_idx, _held) = data.split(cfg.data.holdout_fraction);
    let pipe = Pipeline::build(cfg, data.vocab.clone())?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.train_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .map_err(AppError::Math)?;

    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let (mut store, mut state, mut opt) = if resume {
        let state = read_state(out)?.ok_or_else(|| {
            AppError::Checkpoint(format!("nothing to resume in {}", out.display()))
        })?;
        let store = checkpoint::load_store::<f64>(&out.join(PARAMS_FILE))?;
        let opt = checkpoint::load_adam::<f64>(
            &out.join(OPTIM_FILE),
            AdamConfig::new(cfg.optim.lr, cfg.optim.warmup_steps),
        )?;
        (store, state, opt)
    } else {
        let store = pipe.init_store(cfg.seed)?;
        let state = TrainState {
            phase: 0,
            step: 0,
            best_loss: f64::INFINITY,
        };
        let opt = Adam::new(AdamConfig::new(cfg.optim.lr, cfg.optim.warmup_steps));
        (store, state, opt)
    };

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(LOSS_LOG))?;
    let mut best_store: Option<ParamStore<f64>> = None;
    let mut phases: Vec<PhaseReport> = Vec::new();
    let total_steps = cfg.optim.steps_per_stage;
    let mut done_here = 0usize;

    while state.phase < pipe.stages.len() {
        if state.step == 0 {
            // Phase not yet started: fresh moments for the new stage.
            opt = Adam::new(AdamConfig::new(cfg.optim.lr, cfg.optim.warmup_steps));
        }
        let runner = PhaseRunner {
            cfg,
            pipe: &pipe,
            sched: &sched,
            data: &data,
            train_idx: &train_idx,
            phase: state.phase,
        };
        let mut first: Vec<f64> = Vec::new();
        let mut last: Vec<f64> = Vec::new();
        let window = 25usize.min(total_steps);
        while state.step < total_steps {
            if limit.is_some_and(|n| done_here >= n) {
                log.flush()?;
                save_all(out, &store, &opt, best_store.as_ref(), &state)?;
                return Ok(TrainReport {
                    phases,
                    out_dir: out.clone(),
                });
            }
            state.step += 1;
            done_here += 1;
            let (loss, lr) = runner.step(&mut store, &mut opt, state.step)?;
            if !loss.is_finite() {
                return Err(AppError::Data(format!(
                    "loss diverged at phase {} step {}",
                    state.phase, state.step
                )));
            }
            let rec = LossRecord {
                stage: state.phase,
                step: state.step,
                loss,
                lr,
            };
            let line =
                serde_json::to_string(&rec).map_err(|e| AppError::Data(e.to_string()))?;
            writeln!(log, "{}", line)?;
            if first.len() < window {
                first.push(loss);
            }
            last.push(loss);
            if last.len() > window {
                last.remove(0);
            }
            if loss < state.best_loss {
                state.best_loss = loss;
                best_store = Some(store.clone());
            }
        }
        log.flush()?;
        phases.push(PhaseReport {
            stage: state.phase,
            resolution: pipe.stages[state.phase].config().resolution,
            initial_loss: first.iter().sum::<f64>() / first.len().max(1) as f64,
            final_loss: last.iter().sum::<f64>() / last.len().max(1) as f64,
            best_loss: state.best_loss,
            steps: state.step,
        });
        state.phase += 1;
        state.step = 0;
        state.best_loss = f64::INFINITY;
        save_all(out, &store, &opt, best_store.as_ref(), &state)?;
        best_store = None;
    }
    Ok(TrainReport {
        phases,
        out_dir: out.clone(),
    })
}
