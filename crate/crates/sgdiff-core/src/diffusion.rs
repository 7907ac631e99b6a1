//! DDPM noise schedules, forward noising, the training loss, and the
//! cascaded ancestral sampler.
//!
//! Schedules and sampler arithmetic run in plain f64; only the denoiser
//! forward pass (and the training loss built on it) goes through the tape.

use alloc::string::String;
use alloc::vec::Vec;

use crate::element::Element;
use crate::params::{ParamStore, Session};
use crate::rng::Prng;
use crate::tensor::{Result, TensorError, Var};
use crate::unet::{ConditionalEmbeddings, UNetModel};
use crate::nn;

/// Default number of training timesteps.
pub const TRAIN_STEPS: usize = 200;
/// Default number of sampling timesteps after respacing.
pub const SAMPLE_STEPS: usize = 50;
/// Default linear-schedule endpoints.
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

fn bad(msg: String) -> TensorError {
    TensorError::BadArgument {
        op: "diffusion",
        message: msg,
    }
}

// ── schedule ──

/// Variance schedule for a diffusion stage.
///
/// `betas[k]` is the step variance for timestep `k + 1`; `alpha_bars[t]`
/// is the cumulative product of `1 - beta` through timestep `t`, with
/// `alpha_bars[0] = 1` so that timestep 0 is the clean image.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(bad("noise schedule needs at least one step".into()));
        }
        let mut betas = Vec::with_capacity(steps);
        for k in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                k as f64 / (steps - 1) as f64
            };
            betas.push(beta_start + frac * (beta_end - beta_start));
        }
        Self::from_betas(betas)
    }

    /// The desk-scale training schedule.
    pub fn default_train() -> Self {
        Self::linear(TRAIN_STEPS, BETA_START, BETA_END).unwrap()
    }

    /// Builds cumulative products and validates the schedule.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(bad("noise schedule needs at least one step".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for (k, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(bad(alloc::format!(
                    "beta[{}] = {} outside (0, 1)",
                    k + 1,
                    b
                )));
            }
            prod *= 1.0 - b;
            if !(prod > 0.0 && prod < *alpha_bars.last().unwrap()) {
                return Err(bad(alloc::format!(
                    "alpha_bar must stay in (0, 1] and strictly decrease at t = {}",
                    k + 1
                )));
            }
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Step variance at timestep `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal retention at timestep `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Coarser schedule over `steps` strided timesteps, plus the original
    /// timestep each coarse step corresponds to (used to condition the
    /// denoiser, which was trained on the fine schedule's clock).
    ///
    /// The effective beta for coarse step `k` keeps the cumulative
    /// products aligned: `1 - alpha_bar(tau_k) / alpha_bar(tau_{k-1})`.
    pub fn respaced(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(bad(alloc::format!(
                "cannot respace {} steps to {}",
                t_max,
                steps
            )));
        }
        let mut taus = Vec::with_capacity(steps);
        for k in 1..=steps {
            // Rounded even striding; lands exactly on T for the last step.
            let tau = (k * t_max + steps / 2) / steps;
            taus.push(tau.max(1));
        }
        for w in taus.windows(2) {
            if w[1] <= w[0] {
                return Err(bad("respaced timesteps must strictly increase".into()));
            }
        }
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 0usize;
        for &tau in &taus {
            betas.push(1.0 - self.alpha_bar(tau) / self.alpha_bar(prev));
            prev = tau;
        }
        let sub = NoiseSchedule::from_betas(betas)?;
        Ok((sub, taus))
    }
}

// ── forward process ──

/// Closed-form forward noising: `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
/// Timestep 0 returns `x0` bit-exactly.
pub fn forward_noise(
    sched: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if t > sched.len() {
        return Err(bad(alloc::format!(
            "timestep {} beyond schedule length {}",
            t,
            sched.len()
        )));
    }
    if x0.len() != eps.len() {
        return Err(bad("x0 and eps length mismatch".into()));
    }
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let ab = sched.alpha_bar(t);
    let (cs, cn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| cs * x + cn * e)
        .collect())
}

/// Draws a uniform training timestep in `1..=T` and a matching noise image.
pub fn sample_t_eps(rng: &mut Prng, sched: &NoiseSchedule, len: usize) -> (usize, Vec<f64>) {
    let t = 1 + rng.below(sched.len());
    (t, rng.normal_vec(len))
}

// ── training loss ──

/// Denoising MSE for one image at a fixed `(t, eps)` draw.
///
/// The noised input enters the tape as a constant, so gradients reach the
/// parameters only through the denoiser's prediction. `aux` carries the
/// upsampled lower-resolution conditioning image for super-resolution
/// stages and is channel-concatenated ahead of the forward pass.
pub fn training_loss<E: Element>(
    sess: &mut Session<'_, E>,
    model: &UNetModel,
    sched: &NoiseSchedule,
    x0: &[f64],
    aux: Option<&[f64]>,
    cond: &ConditionalEmbeddings,
    t: usize,
    eps: &[f64],
) -> Result<Var> {
    let cfg = model.config();
    let pixels = cfg.resolution * cfg.resolution;
    if x0.len() != pixels * cfg.c_out {
        return Err(bad(alloc::format!(
            "x0 has {} values, stage expects {}",
            x0.len(),
            pixels * cfg.c_out
        )));
    }
    if t == 0 || t > sched.len() {
        return Err(bad(alloc::format!(
            "training timestep {} outside 1..={}",
            t,
            sched.len()
        )));
    }
    let z = forward_noise(sched, x0, t, eps)?;
    let input = assemble_input(&z, aux, pixels, cfg.c_out, cfg.c_in)?;
    let z_var = sess.constant_f64(&input, alloc::vec![pixels, cfg.c_in])?;
    let pred = model.forward(sess, z_var, t, cond)?;
    let target = if cfg.predict_x0 { x0 } else { eps };
    let target_var = sess.constant_f64(target, alloc::vec![pixels, cfg.c_out])?;
    nn::mse(sess, pred, target_var)
}

/// Interleaves the noised image with optional conditioning channels so that
/// each pixel reads `[z_0.., aux_0..]`, matching the model's `c_in`.
fn assemble_input(
    z: &[f64],
    aux: Option<&[f64]>,
    pixels: usize,
    c: usize,
    c_in: usize,
) -> Result<Vec<f64>> {
    match aux {
        None => {
            if c_in != c {
                return Err(bad(alloc::format!(
                    "stage wants {} input channels but got {} and no conditioning image",
                    c_in,
                    c
                )));
            }
            Ok(z.to_vec())
        }
        Some(low) => {
            if c_in != 2 * c || low.len() != pixels * c {
                return Err(bad(
                    "conditioning image does not match the stage's channel layout".into(),
                ));
            }
            let mut out = Vec::with_capacity(pixels * c_in);
            for p in 0..pixels {
                out.extend_from_slice(&z[p * c..(p + 1) * c]);
                out.extend_from_slice(&low[p * c..(p + 1) * c]);
            }
            Ok(out)
        }
    }
}

// ── reverse process ──

/// One ancestral step on schedule step `k` (counting `steps..=1`).
///
/// `pred` is the denoiser output at this step; it is read as a noise
/// estimate unless `pred_is_x0`. `noise` must be `None` exactly when
/// `k == 1`: the final step is deterministic.
pub fn ddpm_step(
    sched: &NoiseSchedule,
    k: usize,
    pred_is_x0: bool,
    z: &[f64],
    pred: &[f64],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if k == 0 || k > sched.len() {
        return Err(bad(alloc::format!(
            "sampler step {} outside 1..={}",
            k,
            sched.len()
        )));
    }
    if z.len() != pred.len() {
        return Err(bad("latent and prediction length mismatch".into()));
    }
    if (k == 1) != noise.is_none() {
        return Err(bad(
            "the final sampler step takes no noise; every other step needs it".into(),
        ));
    }
    let beta = sched.beta(k);
    let alpha = 1.0 - beta;
    let ab = sched.alpha_bar(k);
    let ab_prev = sched.alpha_bar(k - 1);
    // Posterior variance of z_{k-1} given z_k and x0.
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = libm::sqrt(var);

    let mut out = Vec::with_capacity(z.len());
    if pred_is_x0 {
        let cz = libm::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
        let cx = libm::sqrt(ab_prev) * beta / (1.0 - ab);
        for i in 0..z.len() {
            let x0_hat = pred[i].clamp(-1.0, 1.0);
            out.push(cz * z[i] + cx * x0_hat);
        }
    } else {
        let ce = beta / libm::sqrt(1.0 - ab);
        let inv = 1.0 / libm::sqrt(alpha);
        for i in 0..z.len() {
            out.push(inv * (z[i] - ce * pred[i]));
        }
    }
    if let Some(n) = noise {
        if n.len() != z.len() {
            return Err(bad("noise length mismatch".into()));
        }
        for i in 0..out.len() {
            out[i] += sigma * n[i];
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling of a `[res*res, c]` image by an integer factor.
pub fn upsample_nn(img: &[f64], res: usize, c: usize, factor: usize) -> Vec<f64> {
    let hi = res * factor;
    let mut out = Vec::with_capacity(hi * hi * c);
    for r in 0..hi {
        for col in 0..hi {
            let p = (r / factor) * res + col / factor;
            out.extend_from_slice(&img[p * c..(p + 1) * c]);
        }
    }
    out
}

/// Clamps every value into the data range `[-1, 1]`.
pub fn clamp_unit(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Builds the conditioning embeddings for a given model inside the step's
/// fresh session. Sampling opens one session per denoiser call, so the
/// text and graph encoders rerun each step; at desk scale they are a
/// rounding error next to the UNet forward.
pub type CondBuilder<'c, E> =
    dyn Fn(&mut Session<'_, E>, &UNetModel) -> Result<ConditionalEmbeddings> + 'c;

/// Ancestral sampling for one stage. `lowres` is the previous stage's
/// output at its native resolution; it is nearest-neighbour upsampled here.
/// The returned image is clamped to `[-1, 1]`.
pub fn sample_stage<E: Element>(
    store: &ParamStore<E>,
    model: &UNetModel,
    sched: &NoiseSchedule,
    steps: usize,
    cond_builder: &CondBuilder<'_, E>,
    lowres: Option<(&[f64], usize)>,
    rng: &mut Prng,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    let pixels = cfg.resolution * cfg.resolution;
    let (sub, taus) = sched.respaced(steps)?;
    let aux = match lowres {
        None => None,
        Some((img, low_res)) => {
            if cfg.resolution % low_res != 0 {
                return Err(bad(alloc::format!(
                    "stage resolution {} is not a multiple of the conditioning resolution {}",
                    cfg.resolution,
                    low_res
                )));
            }
            Some(upsample_nn(img, low_res, cfg.c_out, cfg.resolution / low_res))
        }
    };
    let mut z: Vec<f64> = rng.normal_vec(pixels * cfg.c_out);
    for k in (1..=steps).rev() {
        let input = assemble_input(&z, aux.as_deref(), pixels, cfg.c_out, cfg.c_in)?;
        let mut sess = Session::new(store);
        let cond = cond_builder(&mut sess, model)?;
        let z_var = sess.constant_f64(&input, alloc::vec![pixels, cfg.c_in])?;
        let pred_var = model.forward(&mut sess, z_var, taus[k - 1], &cond)?;
        let pred: Vec<f64> = sess.value(pred_var).iter().map(|v| v.to_f64()).collect();
        let noise: Option<Vec<f64>> = if k > 1 {
            Some(rng.normal_vec(z.len()))
        } else {
            None
        };
        z = ddpm_step(&sub, k, cfg.predict_x0, &z, &pred, noise.as_deref())?;
    }
    clamp_unit(&mut z);
    Ok(z)
}

/// Runs the full cascade and returns every stage's clamped output in
/// order of increasing resolution. Stage 0 starts from pure noise; each
/// later stage is conditioned on its predecessor's output.
pub fn cascade_sample<E: Element>(
    store: &ParamStore<E>,
    stages: &[(&UNetModel, &NoiseSchedule)],
    steps: usize,
    cond_builder: &CondBuilder<'_, E>,
    rng: &mut Prng,
) -> Result<Vec<Vec<f64>>> {
    if stages.is_empty() {
        return Err(bad("cascade needs at least one stage".into()));
    }
    for (i, (model, _)) in stages.iter().enumerate() {
        let cfg = model.config();
        if i == 0 {
            if cfg.c_in != cfg.c_out {
                return Err(bad("base stage must not expect a conditioning image".into()));
            }
        } else {
            let prev = stages[i - 1].0.config();
            if cfg.c_in != 2 * cfg.c_out || cfg.c_out != prev.c_out {
                return Err(bad(alloc::format!(
                    "stage {} channel layout does not chain onto its predecessor",
                    i
                )));
            }
            if cfg.resolution <= prev.resolution || cfg.resolution % prev.resolution != 0 {
                return Err(bad(alloc::format!(
                    "stage {} resolution {} does not upscale {}",
                    i,
                    cfg.resolution,
                    prev.resolution
                )));
            }
        }
    }
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(stages.len());
    for (i, (model, sched)) in stages.iter().enumerate() {
        let lowres = if i == 0 {
            None
        } else {
            Some((
                outputs[i - 1].as_slice(),
                stages[i - 1].0.config().resolution,
            ))
        };
        let img = sample_stage(store, model, sched, steps, cond_builder, lowres, rng)?;
        outputs.push(img);
    }
    Ok(outputs)
}

// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphconv::{GraphConvConfig, GraphEncoder};
    use crate::rng::stream;
    use crate::scenegraph::parse_caption;
    use crate::textenc::{TextEncoder, TextEncoderConfig, Vocabulary};
    use crate::unet::UNetConfig;
    use alloc::vec;

    #[test]
    fn schedule_shape_and_validation() {
        let s = NoiseSchedule::default_train();
        assert_eq!(s.len(), TRAIN_STEPS);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1) - BETA_START).abs() < 1e-15);
        assert!((s.beta(TRAIN_STEPS) - BETA_END).abs() < 1e-15);
        for t in 1..=s.len() {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
    }

    // Folding one noising step at a time onto (signal coefficient, noise
    // variance) must land on the closed-form coefficients.
    #[test]
    fn closed_form_matches_step_recursion() {
        let s = NoiseSchedule::default_train();
        let mut coef = 1.0;
        let mut var = 0.0;
        for t in 1..=s.len() {
            let b = s.beta(t);
            coef *= libm::sqrt(1.0 - b);
            var = (1.0 - b) * var + b;
            let ab = s.alpha_bar(t);
            assert!((coef - libm::sqrt(ab)).abs() < 1e-5);
            assert!((var - (1.0 - ab)).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_noise_is_identity_at_zero() {
        let s = NoiseSchedule::default_train();
        let mut rng = Prng::new(7, stream::EVAL);
        let x0: Vec<f64> = rng.normal_vec(48);
        let eps: Vec<f64> = rng.normal_vec(48);
        let z = forward_noise(&s, &x0, 0, &eps).unwrap();
        assert_eq!(z, x0);
        assert!(forward_noise(&s, &x0, s.len() + 1, &eps).is_err());
    }

    #[test]
    fn forward_noise_preserves_variance() {
        let s = NoiseSchedule::default_train();
        let mut rng = Prng::new(11, stream::EVAL);
        let n = 64;
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..1000 {
            let x0: Vec<f64> = rng.normal_vec(n);
            let eps: Vec<f64> = rng.normal_vec(n);
            let t = 1 + rng.below(s.len());
            let z = forward_noise(&s, &x0, t, &eps).unwrap();
            for v in z {
                acc += v * v;
                count += 1;
            }
        }
        let var = acc / count as f64;
        assert!((var - 1.0).abs() < 0.05, "variance drifted to {}", var);
    }

    // With a long schedule alpha_bar(T) is near zero, so the noised image
    // forgets the clean one.
    #[test]
    fn deep_timestep_decorrelates() {
        let s = NoiseSchedule::linear(1000, BETA_START, BETA_END).unwrap();
        assert!(s.alpha_bar(s.len()) < 1e-3);
        let mut rng = Prng::new(13, stream::EVAL);
        let n = 64;
        let mut num = 0.0;
        let mut dx = 0.0;
        let mut dz = 0.0;
        for _ in 0..1000 {
            let x0: Vec<f64> = rng.normal_vec(n);
            let eps: Vec<f64> = rng.normal_vec(n);
            let z = forward_noise(&s, &x0, s.len(), &eps).unwrap();
            for i in 0..n {
                num += x0[i] * z[i];
                dx += x0[i] * x0[i];
                dz += z[i] * z[i];
            }
        }
        let corr = num / libm::sqrt(dx * dz);
        assert!(corr.abs() < 0.1, "correlation {}", corr);
    }

    #[test]
    fn respacing_aligns_cumulative_products() {
        let s = NoiseSchedule::default_train();
        let (sub, taus) = s.respaced(SAMPLE_STEPS).unwrap();
        assert_eq!(sub.len(), SAMPLE_STEPS);
        assert_eq!(taus.len(), SAMPLE_STEPS);
        assert_eq!(*taus.last().unwrap(), s.len());
        for (k, &tau) in taus.iter().enumerate() {
            let diff = sub.alpha_bar(k + 1) - s.alpha_bar(tau);
            assert!(diff.abs() < 1e-12, "step {} drifted by {}", k + 1, diff);
        }
        assert!(s.respaced(0).is_err());
        assert!(s.respaced(s.len() + 1).is_err());
        let (full, full_taus) = s.respaced(s.len()).unwrap();
        assert_eq!(full_taus, (1..=s.len()).collect::<Vec<_>>());
        for t in 1..=s.len() {
            assert!((full.beta(t) - s.beta(t)).abs() < 1e-12);
        }
    }

    fn tiny_rig(
        seed: u64,
        resolution: usize,
        c_in: usize,
        merges: usize,
    ) -> (
        ParamStore<f64>,
        UNetModel,
        TextEncoder,
        GraphEncoder,
        Vocabulary,
    ) {
        let d_cond = 8;
        let cfg = UNetConfig {
            resolution,
            patch: 1,
            c_in,
            c_out: 3,
            embed_dim: 6,
            merges,
            num_block: 2,
            heads: 2,
            d_cond,
            t_max: TRAIN_STEPS,
            predict_x0: false,
            full_attention: false,
        };
        let vocab = Vocabulary::world();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Prng::new(seed, stream::INIT);
        let text = TextEncoder::new(
            "tx",
            TextEncoderConfig {
                vocab_size: vocab.len(),
                d_text: 8,
                layers: 1,
                heads: 2,
                max_len: 16,
            },
        )
        .unwrap();
        text.register(&mut store, &mut rng).unwrap();
        let graph = GraphEncoder::new(
            "g",
            GraphConvConfig {
                d: 8,
                hidden: 16,
                layers: 1,
            },
        );
        graph.register(&mut store, &mut rng).unwrap();
        let model = UNetModel::new("m", cfg, 8, 8).unwrap();
        model.register(&mut store, &mut rng).unwrap();
        (store, model, text, graph, vocab)
    }

    fn builder<'c>(
        text: &'c TextEncoder,
        graph: &'c GraphEncoder,
        vocab: &'c Vocabulary,
        caption: &'c str,
    ) -> impl Fn(&mut Session<'_, f64>, &UNetModel) -> Result<ConditionalEmbeddings> + 'c {
        move |sess, model| {
            let ids = vocab.encode_padded(caption, 12);
            let enc = text.forward(sess, &ids)?;
            let sg = parse_caption(caption).map_err(|_| bad("caption".into()))?;
            let genc = graph.forward(sess, &sg)?;
            model.conditioner().build(sess, &enc, Some(&genc))
        }
    }

    #[test]
    fn training_loss_matches_pixel_loop() {
        let (store, model, text, graph, vocab) = tiny_rig(31, 8, 3, 1);
        let caption = "a red circle above a blue square";
        let mut rng = Prng::new(5, stream::EVAL);
        let sched = NoiseSchedule::default_train();
        let x0: Vec<f64> = rng.uniform_vec(64 * 3, 1.0);
        let (t, eps) = sample_t_eps(&mut rng, &sched, x0.len());
        assert!(t >= 1 && t <= sched.len());

        let b = builder(&text, &graph, &vocab, caption);
        let mut sess = Session::new(&store);
        let cond = b(&mut sess, &model).unwrap();
        let loss =
            training_loss(&mut sess, &model, &sched, &x0, None, &cond, t, &eps).unwrap();
        let loss_val = sess.value(loss)[0];

        // Rerun the forward pass alone and fold the squared error by hand.
        let mut sess2 = Session::new(&store);
        let cond2 = b(&mut sess2, &model).unwrap();
        let z = forward_noise(&sched, &x0, t, &eps).unwrap();
        let zv = sess2.constant_f64(&z, vec![64, 3]).unwrap();
        let pred_var = model.forward(&mut sess2, zv, t, &cond2).unwrap();
        let pred = sess2.value(pred_var).to_vec();
        let mut acc = 0.0;
        for i in 0..pred.len() {
            let d = pred[i] - eps[i];
            acc += d * d;
        }
        let oracle = acc / pred.len() as f64;
        assert!(
            (loss_val - oracle).abs() < 1e-7,
            "loss {} vs oracle {}",
            loss_val,
            oracle
        );
        assert!(loss_val > 0.0);

        assert!(
            training_loss(&mut sess, &model, &sched, &x0, None, &cond, 0, &eps).is_err()
        );
        assert!(training_loss(
            &mut sess,
            &model,
            &sched,
            &x0[..12],
            None,
            &cond,
            t,
            &eps
        )
        .is_err());
    }

    // An oracle that reports the exact noise in z_t lets the sampler walk
    // back to the clean image: the final step multiplies the remaining
    // z-dependence by 1 - alpha_bar(0) = 0, so only the small injected
    // posterior noise survives.
    #[test]
    fn oracle_denoiser_recovers_clean_image() {
        let train = NoiseSchedule::default_train();
        let (sub, _taus) = train.respaced(SAMPLE_STEPS).unwrap();
        let mut rng = Prng::new(17, stream::EVAL);
        let n = 8 * 8 * 3;
        let x0: Vec<f64> = rng.uniform_vec(n, 1.0);
        let mut z: Vec<f64> = rng.normal_vec(n);
        for k in (1..=sub.len()).rev() {
            let ab = sub.alpha_bar(k);
            let (cs, cn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
            let eps_hat: Vec<f64> = z.iter().zip(&x0).map(|(&zv, &xv)| (zv - cs * xv) / cn).collect();
            let noise: Option<Vec<f64>> = if k > 1 { Some(rng.normal_vec(n)) } else { None };
            z = ddpm_step(&sub, k, false, &z, &eps_hat, noise.as_deref()).unwrap();
        }
        let mut acc = 0.0;
        for i in 0..n {
            let d = z[i] - x0[i];
            acc += d * d;
        }
        let rmse = libm::sqrt(acc / n as f64);
        assert!(rmse < 0.05, "rmse {}", rmse);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = NoiseSchedule::default_train();
        let mut rng = Prng::new(23, stream::EVAL);
        let z: Vec<f64> = rng.normal_vec(12);
        let pred: Vec<f64> = rng.normal_vec(12);
        let a = ddpm_step(&s, 1, false, &z, &pred, None).unwrap();
        let b = ddpm_step(&s, 1, false, &z, &pred, None).unwrap();
        assert_eq!(a, b);
        let noise: Vec<f64> = rng.normal_vec(12);
        assert!(ddpm_step(&s, 1, false, &z, &pred, Some(&noise)).is_err());
        assert!(ddpm_step(&s, 2, false, &z, &pred, None).is_err());
        assert!(ddpm_step(&s, 0, false, &z, &pred, Some(&noise)).is_err());
    }

    #[test]
    fn x0_prediction_clamps_before_posterior() {
        let s = NoiseSchedule::default_train();
        let z = vec![0.5; 4];
        let wild = vec![25.0; 4];
        let tame = vec![1.0; 4];
        let a = ddpm_step(&s, 1, true, &z, &wild, None).unwrap();
        let b = ddpm_step(&s, 1, true, &z, &tame, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upsample_repeats_pixels() {
        // 2x2 single-channel image upsampled to 4x4.
        let img = vec![1.0, 2.0, 3.0, 4.0];
        let up = upsample_nn(&img, 2, 1, 2);
        let want = vec![
            1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up, want);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (store, model, text, graph, vocab) = tiny_rig(41, 8, 3, 1);
        let sched = NoiseSchedule::default_train();
        let b = builder(&text, &graph, &vocab, "a green triangle");
        let run = |seed: u64| {
            let mut rng = Prng::new(seed, stream::SAMPLE);
            sample_stage(&store, &model, &sched, 6, &b, None, &mut rng).unwrap()
        };
        let a = run(99);
        let b2 = run(99);
        let c = run(100);
        assert_eq!(a, b2);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
        assert!(a.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(a.len(), 8 * 8 * 3);
    }

    #[test]
    fn cascade_chains_and_clamps() {
        // 8 -> 16 cascade with untrained weights; checks the wiring, the
        // output range, and that an untrained sampler stays roughly centred.
        let d_cond = 8;
        let vocab = Vocabulary::world();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Prng::new(57, stream::INIT);
        let text = TextEncoder::new(
            "tx",
            TextEncoderConfig {
                vocab_size: vocab.len(),
                d_text: 8,
                layers: 1,
                heads: 2,
                max_len: 16,
            },
        )
        .unwrap();
        text.register(&mut store, &mut rng).unwrap();
        let graph = GraphEncoder::new(
            "g",
            GraphConvConfig {
                d: 8,
                hidden: 16,
                layers: 1,
            },
        );
        graph.register(&mut store, &mut rng).unwrap();
        let base_cfg = UNetConfig {
            resolution: 8,
            patch: 1,
            c_in: 3,
            c_out: 3,
            embed_dim: 6,
            merges: 1,
            num_block: 2,
            heads: 2,
            d_cond,
            t_max: TRAIN_STEPS,
            predict_x0: false,
            full_attention: false,
        };
        let sr_cfg = UNetConfig {
            resolution: 16,
            patch: 1,
            c_in: 6,
            c_out: 3,
            embed_dim: 6,
            merges: 1,
            num_block: 2,
            heads: 2,
            d_cond,
            t_max: TRAIN_STEPS,
            predict_x0: false,
            full_attention: false,
        };
        let base = UNetModel::new("m0", base_cfg, 8, 8).unwrap();
        base.register(&mut store, &mut rng).unwrap();
        let sr = UNetModel::new("m1", sr_cfg, 8, 8).unwrap();
        sr.register(&mut store, &mut rng).unwrap();
        let sched = NoiseSchedule::default_train();
        let b = builder(&text, &graph, &vocab, "a red circle left of a blue square");
        let mut srng = Prng::new(3, stream::SAMPLE);
        let outs = cascade_sample(
            &store,
            &[(&base, &sched), (&sr, &sched)],
            5,
            &b,
            &mut srng,
        )
        .unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].len(), 8 * 8 * 3);
        assert_eq!(outs[1].len(), 16 * 16 * 3);
        for img in &outs {
            assert!(img.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            let mean: f64 = img.iter().sum::<f64>() / img.len() as f64;
            assert!(mean.abs() < 0.2, "untrained output drifted to mean {}", mean);
        }

        // A stage whose channels do not chain is rejected up front.
        let err = cascade_sample(
            &store,
            &[(&base, &sched), (&base, &sched)],
            5,
            &b,
            &mut srng,
        );
        assert!(err.is_err());
    }
}
