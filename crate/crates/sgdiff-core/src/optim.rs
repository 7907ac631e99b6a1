//! Adam with linear warmup and post-step clamping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::params::ParamStore;
use crate::tensor::Result;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear ramp from 0 to `lr`; constant afterwards.
    pub warmup_steps: usize,
}

impl AdamConfig {
    pub fn new(lr: f64, warmup_steps: usize) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps }
    }

    /// Learning rate at 1-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Optimizer state. Moments live in the training dtype so checkpoints
/// round-trip bit-exactly.
pub struct Adam<E: Element> {
    pub cfg: AdamConfig,
    step: usize,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update from per-path gradients; paths absent from `grads`
    /// (frozen parameters) are left untouched. Returns the learning rate used.
    /// Lower-bounded parameters are re-clamped after the update.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &BTreeMap<String, Vec<E>>) -> Result<f64> {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_minus_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_minus_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let bc1 = 1.0 - libm::pow(self.cfg.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.cfg.beta2, self.step as f64);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let lr_e = E::from_f64(lr);
        let eps = E::from_f64(self.cfg.eps);

        for (path, g) in grads {
            let param = store.get_mut(path)?;
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![E::ZERO; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![E::ZERO; g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_minus_b1 * g[i];
                v[i] = b2 * v[i] + one_minus_b2 * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                param.data[i] = param.data[i] - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.apply_lower_bounds();
        Ok(lr)
    }

    pub fn moments(&self) -> (&BTreeMap<String, Vec<E>>, &BTreeMap<String, Vec<E>>) {
        (&self.m, &self.v)
    }

    /// Rebuild state from checkpointed moments.
    pub fn restore(cfg: AdamConfig, step: usize, m: BTreeMap<String, Vec<E>>, v: BTreeMap<String, Vec<E>>) -> Self {
        Adam { cfg, step, m, v }
    }
}

/// Retain only gradients whose path passes the filter; used for freezing.
pub fn filter_grads<E: Element>(
    grads: BTreeMap<String, Vec<E>>,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Vec<E>> {
    grads.into_iter().filter(|(path, _)| trainable(path)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_is_half_rate() {
        let cfg = AdamConfig::new(3e-4, 100);
        assert!((cfg.lr_at(50) - 1.5e-4).abs() < 1e-9);
        assert!((cfg.lr_at(100) - 3e-4).abs() < 1e-18);
        assert!((cfg.lr_at(5000) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_const("w", vec![1], 1.0).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.1, 0));
        let mut grads = BTreeMap::new();
        grads.insert(alloc::string::String::from("w"), vec![2.5]);
        opt.step(&mut store, &grads).unwrap();
        // Bias-corrected first step is lr·g/(|g|+eps') ≈ lr regardless of g scale.
        let w = store.get("w").unwrap().data[0];
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn clamp_applies_after_each_step() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_const("tau", vec![1], 0.02).unwrap();
        store.set_lower_bound("tau", 0.01).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.05, 0));
        let mut grads = BTreeMap::new();
        // Large positive gradient drives tau down; the clamp must hold it.
        grads.insert(alloc::string::String::from("tau"), vec![10.0]);
        for _ in 0..20 {
            opt.step(&mut store, &grads).unwrap();
            assert!(store.get("tau").unwrap().data[0] >= 0.01);
        }
    }

    #[test]
    fn frozen_paths_stay_put() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_const("a", vec![1], 1.0).unwrap();
        store.add_const("frozen.b", vec![1], 1.0).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(alloc::string::String::from("a"), vec![1.0]);
        grads.insert(alloc::string::String::from("frozen.b"), vec![1.0]);
        let grads = filter_grads(grads, |p| !p.starts_with("frozen."));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0));
        opt.step(&mut store, &grads).unwrap();
        assert!(store.get("a").unwrap().data[0] < 1.0);
        assert_eq!(store.get("frozen.b").unwrap().data[0], 1.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = crate::rng::Prng::new(1, crate::rng::stream::INIT);
            let mut store: ParamStore<f64> = ParamStore::new();
            store.add_uniform(&mut rng, "w", vec![8], 0.5).unwrap();
            let mut opt = Adam::new(AdamConfig::new(1e-2, 10));
            for step in 0..25 {
                let mut g_rng = crate::rng::Prng::counted(1, crate::rng::stream::TRAIN_STEP, step);
                let mut grads = BTreeMap::new();
                grads.insert(alloc::string::String::from("w"), g_rng.normal_vec(8));
                opt.step(&mut store, &grads).unwrap();
            }
            store.get("w").unwrap().data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
