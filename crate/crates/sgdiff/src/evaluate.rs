//! Distribution metrics over sampled images: a small classifier is
//! fitted to the dataset, its penultimate features feed the FID-proxy,
//! its class posteriors the IS-proxy. Proxy scores live in this
//! pipeline's own feature space and are only comparable to each other.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgdiff_core::datagen::{self, NUM_CLASSES};
use sgdiff_core::diffusion::NoiseSchedule;
use sgdiff_core::metrics::{self, GaussianStats, ToyFeatureNet};
use sgdiff_core::optim::{Adam, AdamConfig};
use sgdiff_core::rng::{stream, Prng};
use sgdiff_core::{ParamStore, Session};

use crate::config::RunConfig;
use crate::dataset::{self, LoadedDataset};
use crate::error::{AppError, Result};
use crate::pipeline::Pipeline;

pub const REPORT_FILE: &str = "report.json";
const FEAT_STEPS: usize = 240;
const FEAT_BATCH: usize = 32;
const FEAT_LR: f64 = 3e-3;
const FEAT_WARMUP: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: usize,
    pub resolution: usize,
    pub fid_proxy: f64,
    pub is_proxy: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub stages: Vec<StageEval>,
}

/// Fits the feature classifier to the 8 px rung of the given rows.
/// Deterministic in `seed`; the same data and seed always yield the
/// same feature space.
pub fn train_feature_net(
    data: &LoadedDataset,
    idx: &[usize],
    seed: u64,
) -> Result<(ParamStore<f64>, ToyFeatureNet)> {
    dataset::require_samples(idx.len(), 2, "feature fitting")?;
    let net = ToyFeatureNet::desk("feat", NUM_CLASSES);
    let mut store = ParamStore::new();
    let mut rng = Prng::counted(seed, stream::PRETRAIN, 0);
    net.register(&mut store, &mut rng).map_err(AppError::Math)?;
    let mut opt = Adam::new(AdamConfig::new(FEAT_LR, FEAT_WARMUP));
    for step in 0..FEAT_STEPS {
        let mut rng = Prng::counted(seed, stream::PRETRAIN, 1 + step as u64);
        let mut batch_x = Vec::with_capacity(FEAT_BATCH * net.d_in());
        let mut batch_y = Vec::with_capacity(FEAT_BATCH);
        for _ in 0..FEAT_BATCH {
            let sample = &data.samples[idx[rng.below(idx.len())]];
            batch_x.extend_from_slice(&sample.image8);
            batch_y.push(sample.label);
        }
        let mut sess = Session::new(&store);
        let x = sess
            .constant_f64(&batch_x, vec![FEAT_BATCH, net.d_in()])
            .map_err(AppError::Math)?;
        let logits = net.logits(&mut sess, x).map_err(AppError::Math)?;
        let loss = sess
            .tape
            .cross_entropy_logits(logits, batch_y)
            .map_err(AppError::Math)?;
        sess.backward(loss).map_err(AppError::Math)?;
        let grads = sess.grads();
        opt.step(&mut store, &grads).map_err(AppError::Math)?;
    }
    Ok((store, net))
}

fn to_feature_input(img: &[f64], res: usize) -> Result<Vec<f64>> {
    let mut cur = img.to_vec();
    let mut r = res;
    while r > 8 {
        cur = datagen::box_down(&cur, r, 3).map_err(AppError::Math)?;
        r /= 2;
    }
    Ok(cur)
}

/// Penultimate-layer features for a set of images at any ladder
/// resolution; everything is box-averaged to the 8 px rung first.
pub fn image_features(
    fstore: &ParamStore<f64>,
    net: &ToyFeatureNet,
    images: &[Vec<f64>],
    res: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * net.d_feat());
    for img in images {
        let x = to_feature_input(img, res)?;
        let mut sess = Session::new(fstore);
        let v = sess
            .constant_f64(&x, vec![1, net.d_in()])
            .map_err(AppError::Math)?;
        let f = net.features(&mut sess, v).map_err(AppError::Math)?;
        out.extend_from_slice(sess.value(f));
    }
    Ok(out)
}

pub fn image_stats(
    fstore: &ParamStore<f64>,
    net: &ToyFeatureNet,
    images: &[Vec<f64>],
    res: usize,
) -> Result<GaussianStats> {
    let feats = image_features(fstore, net, images, res)?;
    metrics::gaussian_stats(&feats, images.len(), net.d_feat()).map_err(AppError::Math)
}

/// FID-proxy between two image sets at the same resolution.
pub fn fid_proxy(
    fstore: &ParamStore<f64>,
    net: &ToyFeatureNet,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    res: usize,
) -> Result<f64> {
    let sa = image_stats(fstore, net, a, res)?;
    let sb = image_stats(fstore, net, b, res)?;
    metrics::fid(&sa, &sb).map_err(AppError::Math)
}

/// IS-proxy of an image set: exp of the mean KL between per-image class
/// posteriors and their marginal.
pub fn is_proxy(
    fstore: &ParamStore<f64>,
    net: &ToyFeatureNet,
    images: &[Vec<f64>],
    res: usize,
) -> Result<f64> {
    let mut probs = Vec::with_capacity(images.len() * net.classes());
    for img in images {
        let x = to_feature_input(img, res)?;
        let mut sess = Session::new(fstore);
        let v = sess
            .constant_f64(&x, vec![1, net.d_in()])
            .map_err(AppError::Math)?;
        let p = net.probs(&mut sess, v).map_err(AppError::Math)?;
        probs.extend_from_slice(sess.value(p));
    }
    metrics::inception_score(&probs, images.len(), net.classes()).map_err(AppError::Math)
}

/// Samples `n` cascades from held-out captions and scores every stage
/// against the held-out reals at its resolution.
pub fn evaluate(cfg: &RunConfig, store: &ParamStore<f64>, n: usize) -> Result<EvalReport> {
    cfg.validate()?;
    if n < 2 {
        return Err(AppError::Data(format!(
            "need at least 2 samples to estimate covariance, got {}",
            n
        )));
    }
    let data = dataset::load_dataset(&cfg.dataset)?;
    let (train_idx, held_idx) = data.split(cfg.data.holdout_fraction);
    dataset::require_samples(held_idx.len(), 2, "held-out scoring")?;
    let (fstore, net) = train_feature_net(&data, &train_idx, cfg.data.seed)?;

    let pipe = Pipeline::build(cfg, data.vocab.clone())?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.train_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .map_err(AppError::Math)?;
    let stage_pairs: Vec<_> = pipe.stages.iter().map(|m| (m, &sched)).collect();

    // One cascade per requested sample, captions cycled from the
    // held-out rows.
    let mut per_stage: Vec<Vec<Vec<f64>>> = vec![Vec::new(); pipe.stages.len()];
    for i in 0..n {
        let sample = &data.samples[held_idx[i % held_idx.len()]];
        let builder = pipe.cond_builder(&sample.caption, Some(&sample.graph));
        let mut rng = Prng::counted(cfg.seed, stream::SAMPLE, i as u64);
        let images = sgdiff_core::diffusion::cascade_sample(
            store,
            &stage_pairs,
            cfg.schedule.sample_steps,
            &builder,
            &mut rng,
        )
        .map_err(AppError::Math)?;
        for (s, img) in images.into_iter().enumerate() {
            per_stage[s].push(img);
        }
    }

    let mut stages = Vec::with_capacity(pipe.stages.len());
    for (s, fakes) in per_stage.iter().enumerate() {
        let res = pipe.stages[s].config().resolution;
        let reals: Vec<Vec<f64>> = held_idx
            .iter()
            .map(|&i| data.samples[i].at_resolution(res).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        stages.push(StageEval {
            stage: s,
            resolution: res,
            fid_proxy: fid_proxy(&fstore, &net, fakes, &reals, res)?,
            is_proxy: is_proxy(&fstore, &net, fakes, res)?,
            n_samples: n,
            seed: cfg.seed,
        });
    }
    Ok(EvalReport { stages })
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out)?;
    let text =
        serde_json::to_string_pretty(report).map_err(|e| AppError::Data(e.to_string()))?;
    fs::write(out.join(REPORT_FILE), text + "\n")?;
    Ok(())
}

/// Classifier accuracy on given rows; a fitting diagnostic used by tests.
pub fn feature_net_accuracy(
    fstore: &ParamStore<f64>,
    net: &ToyFeatureNet,
    data: &LoadedDataset,
    idx: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    for &i in idx {
        let sample = &data.samples[i];
        let mut sess = Session::new(fstore);
        let v = sess
            .constant_f64(&sample.image8, vec![1, net.d_in()])
            .map_err(AppError::Math)?;
        let l = net.logits(&mut sess, v).map_err(AppError::Math)?;
        let row = sess.value(l);
        let mut arg = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[arg] {
                arg = j;
            }
        }
        if arg == sample.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}
