//! Conditioning/attention ablation grid: trains the base stage under
//! each flag combination with shared seeds and step budgets, then
//! scores every run on the same paired held-out draws.
//!
//! Scene-graph masking leaves the architecture untouched, so the
//! graph-on and graph-off rows have identical parameter counts; the
//! attention rows differ only by the relative-position tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgdiff_core::diffusion::NoiseSchedule;

use crate::checkpoint;
use crate::config::{AblationFlags, RunConfig};
use crate::dataset;
use crate::error::{AppError, Result};
use crate::evaluate;
use crate::pipeline::{self, Pipeline};
use crate::train;

pub const ABLATION_FILE: &str = "ablation.json";

/// Noise draws averaged per held-out row when scoring a cell.
pub const HELDOUT_DRAWS: usize = 8;

/// Full-scale reference FID for each row's configuration, shown for
/// context only; desk-scale FID-proxy values are not comparable to it.
const CONTEXT_FID: [f64; 4] = [7.27, 7.24, 7.23, 7.21];

/// Row order of the comparison table: plain attention first, windowed
/// attention second, scene graph off before on within each pair.
pub const ROW_FLAGS: [(bool, bool); 4] = [
    (false, false),
    (false, true),
    (true, false),
    (true, true),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_swin_unet: bool,
    pub use_scene_graph: bool,
    pub param_count: usize,
    pub heldout_loss: f64,
    pub per_seed_loss: Vec<f64>,
    pub fid_proxy: Option<f64>,
    pub context_fid: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub steps_per_seed: usize,
    pub rows: Vec<AblationRow>,
}

fn row_slug(swin: bool, sg: bool) -> String {
    format!(
        "{}{}",
        if swin { "swin" } else { "plain" },
        if sg { "_sg" } else { "" }
    )
}

fn context_fid_for(swin: bool, sg: bool) -> f64 {
    let i = ROW_FLAGS
        .iter()
        .position(|&(w, g)| w == swin && g == sg)
        .unwrap();
    CONTEXT_FID[i]
}

/// One row under one seed: train the base stage from scratch, report
/// the trained parameters' held-out loss and (optionally) the store.
fn run_cell(
    base: &RunConfig,
    swin: bool,
    sg: bool,
    seed: u64,
    keep_store: bool,
) -> Result<(f64, usize, Option<(RunConfig, sgdiff_core::ParamStore<f64>)>)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.flags = AblationFlags {
        use_scene_graph: sg,
        use_swin_unet: swin,
    };
    cfg.stages.truncate(1);
    cfg.out_dir = base
        .out_dir
        .join("ablate")
        .join(row_slug(swin, sg))
        .join(format!("seed{}", seed));
    train::train(&cfg, false)?;

    let data = dataset::load_dataset(&cfg.dataset)?;
    let (_, held) = data.split(cfg.data.holdout_fraction);
    let pipe = Pipeline::build(&cfg, data.vocab.clone())?;
    let store =
        checkpoint::load_store::<f64>(&cfg.out_dir.join(train::PARAMS_FILE))?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.train_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .map_err(AppError::Math)?;
    let loss = train::heldout_loss(
        &pipe,
        &store,
        &sched,
        &data,
        &held,
        0,
        cfg.data.seed,
        HELDOUT_DRAWS,
    )?;
    let params = pipeline::param_count(&store);
    let kept = keep_store.then(|| (cfg, store));
    Ok((loss, params, kept))
}

/// Trains the requested rows across the shared seed list. With
/// `fid_samples > 0`, the first seed's trained model also samples that
/// many images from held-out captions for a FID-proxy column.
pub fn run_ablation_rows(
    base: &RunConfig,
    seeds: &[u64],
    rows: &[(bool, bool)],
    fid_samples: usize,
) -> Result<AblationReport> {
    base.validate()?;
    base.require_dataset()?;
    if seeds.is_empty() || rows.is_empty() {
        return Err(AppError::Config("ablation needs seeds and rows".into()));
    }
    let mut out_rows = Vec::with_capacity(rows.len());
    for &(swin, sg) in rows {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut params = 0usize;
        let mut fid = None;
        for (k, &seed) in seeds.iter().enumerate() {
            let want_fid = fid_samples > 0 && k == 0;
            let (loss, p, kept) = run_cell(base, swin, sg, seed, want_fid)?;
            per_seed.push(loss);
            params = p;
            if let Some((cfg, store)) = kept {
                fid = Some(row_fid(&cfg, &store, fid_samples)?);
            }
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        out_rows.push(AblationRow {
            label: AblationFlags {
                use_scene_graph: sg,
                use_swin_unet: swin,
            }
            .label(),
            use_swin_unet: swin,
            use_scene_graph: sg,
            param_count: params,
            heldout_loss: mean,
            per_seed_loss: per_seed,
            fid_proxy: fid,
            context_fid: context_fid_for(swin, sg),
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        steps_per_seed: base.optim.steps_per_stage,
        rows: out_rows,
    })
}

/// The standard four-row grid over three derived seeds.
pub fn run_ablation(base: &RunConfig, fid_samples: usize) -> Result<AblationReport> {
    let seeds = [base.seed, base.seed + 1, base.seed + 2];
    run_ablation_rows(base, &seeds, &ROW_FLAGS, fid_samples)
}

/// FID-proxy of `n` base-stage samples against the held-out reals.
fn row_fid(
    cfg: &RunConfig,
    store: &sgdiff_core::ParamStore<f64>,
    n: usize,
) -> Result<f64> {
    let data = dataset::load_dataset(&cfg.dataset)?;
    let (train_idx, held) = data.split(cfg.data.holdout_fraction);
    let (fstore, net) = evaluate::train_feature_net(&data, &train_idx, cfg.data.seed)?;
    let pipe = Pipeline::build(cfg, data.vocab.clone())?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.train_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .map_err(AppError::Math)?;
    let res = pipe.stages[0].config().resolution;
    let mut fakes = Vec::with_capacity(n);
    for i in 0..n {
        let sample = &data.samples[held[i % held.len()]];
        let graph = cfg.flags.use_scene_graph.then(|| sample.graph.clone());
        let builder = pipe.cond_builder(&sample.caption, graph.as_ref());
        let mut rng = sgdiff_core::rng::Prng::counted(
            cfg.seed,
            sgdiff_core::rng::stream::SAMPLE,
            i as u64,
        );
        let img = sgdiff_core::diffusion::sample_stage(
            store,
            &pipe.stages[0],
            &sched,
            cfg.schedule.sample_steps,
            &builder,
            None,
            &mut rng,
        )
        .map_err(AppError::Math)?;
        fakes.push(img);
    }
    let reals: Vec<Vec<f64>> = held
        .iter()
        .map(|&i| data.samples[i].at_resolution(res).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;
    evaluate::fid_proxy(&fstore, &net, &fakes, &reals, res)
}

pub fn write_report(out: &Path, report: &AblationReport) -> Result<()> {
    fs::create_dir_all(out)?;
    let text =
        serde_json::to_string_pretty(report).map_err(|e| AppError::Data(e.to_string()))?;
    fs::write(out.join(ABLATION_FILE), text + "\n")?;
    Ok(())
}

/// Plain-text rendering of the comparison table.
pub fn format_table(report: &AblationReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<38} {:>10} {:>14} {:>12} {:>12}\n",
        "row", "params", "heldout_loss", "fid_proxy", "context_fid"
    ));
    for row in &report.rows {
        let fid = row
            .fid_proxy
            .map(|f| format!("{:.4}", f))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<38} {:>10} {:>14.6} {:>12} {:>12.2}\n",
            row.label, row.param_count, row.heldout_loss, fid, row.context_fid
        ));
    }
    s
}
