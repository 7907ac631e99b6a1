//! Distribution-distance metrics over a small learned feature space:
//! Gaussian moment matching (Frechet distance) and the exponentiated-KL
//! diversity score, plus the toy classifier that supplies the features.
//!
//! The eigensolver is a cyclic Jacobi sweep; at feature dimension 16 it
//! converges in a handful of passes and keeps the crate dependency-free.

use alloc::string::String;
use alloc::vec::Vec;

use crate::element::Element;
use crate::nn::Linear;
use crate::params::{ParamStore, Session};
use crate::rng::Prng;
use crate::tensor::{Result, TensorError, Var};

/// Feature dimension exposed by the toy extractor.
pub const D_FEAT: usize = 16;
/// Tolerance for "rows are probability distributions".
pub const ROW_SUM_TOL: f64 = 1e-4;

fn bad(msg: String) -> TensorError {
    TensorError::BadArgument {
        op: "metrics",
        message: msg,
    }
}

// ── gaussian moments ──

/// Sample mean and unbiased covariance of a feature batch.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `[d, d]`, symmetric.
    pub sigma: Vec<f64>,
    pub d: usize,
    pub n: usize,
}

/// Moments of `features`, a row-major `[n, d]` batch. Needs `n >= 2` for
/// the unbiased divisor.
pub fn gaussian_stats(features: &[f64], n: usize, d: usize) -> Result<GaussianStats> {
    if n < 2 {
        return Err(bad(alloc::format!(
            "covariance needs at least 2 samples, got {}",
            n
        )));
    }
    if features.len() != n * d {
        return Err(bad("feature buffer does not match n * d".into()));
    }
    let mut mu = alloc::vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            mu[j] += features[row * d + j];
        }
    }
    for j in 0..d {
        mu[j] /= n as f64;
    }
    let mut sigma = alloc::vec![0.0; d * d];
    for row in 0..n {
        for i in 0..d {
            let di = features[row * d + i] - mu[i];
            for j in i..d {
                sigma[i * d + j] += di * (features[row * d + j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / denom;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma, d, n })
}

// ── dense symmetric linear algebra ──

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn trace(m: &[f64], d: usize) -> f64 {
    (0..d).map(|i| m[i * d + i]).sum()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in the columns
/// of a row-major `[d, d]` matrix, so `m = V diag(vals) V^T`.
pub fn jacobi_eigh(m: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = alloc::vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    let mut v = alloc::vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = (0..d).map(|i| libm::fabs(a[i * d + i])).fold(1.0, f64::max);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if libm::sqrt(off) <= 1e-13 * scale {
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if libm::fabs(apq) <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(theta * theta + 1.0))
                } else {
                    -1.0 / (-theta + libm::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..d).map(|i| a[i * d + i]).collect();
    (vals, v)
}

/// Symmetric PSD square root. Eigenvalues below zero are rounding debris
/// from upstream products and are clipped before the root.
pub fn psd_sqrt(m: &[f64], d: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigh(m, d);
    let roots: Vec<f64> = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let mut out = alloc::vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vecs[i * d + k] * roots[k] * vecs[j * d + k];
            }
            out[i * d + j] = acc;
            out[j * d + i] = acc;
        }
    }
    out
}

// ── scores ──

/// Frechet distance between two Gaussian summaries:
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the cross
/// root computed as `(S_a^{1/2} S_b S_a^{1/2})^{1/2}` so the eigensolver
/// only ever sees symmetric matrices.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.d != b.d {
        return Err(bad(alloc::format!(
            "feature dimensions differ: {} vs {}",
            a.d,
            b.d
        )));
    }
    let d = a.d;
    let mut mean_term = 0.0;
    for i in 0..d {
        let diff = a.mu[i] - b.mu[i];
        mean_term += diff * diff;
    }
    let root_a = psd_sqrt(&a.sigma, d);
    let inner = matmul_sq(&matmul_sq(&root_a, &b.sigma, d), &root_a, d);
    let cross = psd_sqrt(&inner, d);
    let trace_term = trace(&a.sigma, d) + trace(&b.sigma, d) - 2.0 * trace(&cross, d);
    Ok((mean_term + trace_term).max(0.0))
}

/// Exponentiated mean KL between per-sample class distributions and their
/// marginal. `probs` is row-major `[n, classes]`; every row must sum to 1.
pub fn inception_score(probs: &[f64], n: usize, classes: usize) -> Result<f64> {
    if n == 0 || classes == 0 || probs.len() != n * classes {
        return Err(bad("probability buffer does not match n * classes".into()));
    }
    for row in 0..n {
        let mut sum = 0.0;
        for c in 0..classes {
            let p = probs[row * classes + c];
            if p < 0.0 {
                return Err(bad(alloc::format!(
                    "negative probability in row {}",
                    row
                )));
            }
            sum += p;
        }
        if libm::fabs(sum - 1.0) > ROW_SUM_TOL {
            return Err(TensorError::RowsNotNormalized { row, sum });
        }
    }
    let mut marginal = alloc::vec![0.0; classes];
    for row in 0..n {
        for c in 0..classes {
            marginal[c] += probs[row * classes + c];
        }
    }
    for m in marginal.iter_mut() {
        *m /= n as f64;
    }
    let mut kl_sum = 0.0;
    for row in 0..n {
        for c in 0..classes {
            let p = probs[row * classes + c];
            if p > 0.0 {
                kl_sum += p * libm::log(p / marginal[c]);
            }
        }
    }
    Ok(libm::exp(kl_sum / n as f64))
}

// ── toy feature network ──

/// Small classifier whose penultimate activations stand in for a
/// pretrained feature extractor. Two gelu layers feed a linear head.
pub struct ToyFeatureNet {
    fc1: Linear,
    fc2: Linear,
    head: Linear,
    d_in: usize,
    d_feat: usize,
    classes: usize,
}

impl ToyFeatureNet {
    pub fn new(path: &str, d_in: usize, hidden: usize, d_feat: usize, classes: usize) -> Self {
        Self {
            fc1: Linear::new(&alloc::format!("{}.fc1", path), d_in, hidden, true),
            fc2: Linear::new(&alloc::format!("{}.fc2", path), hidden, d_feat, true),
            head: Linear::new(&alloc::format!("{}.head", path), d_feat, classes, true),
            d_in,
            d_feat,
            classes,
        }
    }

    /// Extractor sized for 8x8 RGB inputs and the scene label space.
    pub fn desk(path: &str, classes: usize) -> Self {
        Self::new(path, 8 * 8 * 3, 64, D_FEAT, classes)
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, rng: &mut Prng) -> Result<()> {
        self.fc1.register(store, rng)?;
        self.fc2.register(store, rng)?;
        self.head.register(store, rng)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Penultimate features for a `[n, d_in]` batch.
    pub fn features<E: Element>(&self, sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(sess, x)?;
        let h = sess.tape.gelu(h)?;
        let f = self.fc2.forward(sess, h)?;
        sess.tape.gelu(f)
    }

    pub fn logits<E: Element>(&self, sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let f = self.features(sess, x)?;
        self.head.forward(sess, f)
    }

    /// Class probabilities; rows sum to 1 by construction.
    pub fn probs<E: Element>(&self, sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let l = self.logits(sess, x)?;
        sess.tape.softmax(l)
    }
}

// ─────────────────────────────────────────────────────────────────────────────
