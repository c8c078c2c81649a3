//! Dense temporal cycle-consistency loss.

use glfusion_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleMode {
    /// Every template interval cycles back.
    #[default]
    Dense,
    /// One random template interval per view and step.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    pub enabled: bool,
    pub chunk_size: usize,
    pub temperature: f64,
    pub similarity: Similarity,
    pub mode: CycleMode,
    /// Place the template window at a random cyclic offset instead of the clip start.
    pub random_split: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            chunk_size: 4,
            temperature: 0.1,
            similarity: Similarity::Cosine,
            mode: CycleMode::Dense,
            random_split: false,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("cycle chunk_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("cycle temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Template and search lengths `(⌊2T/5⌋, T - ⌊2T/5⌋)`.
pub fn split_template_search(num_frames: usize) -> Result<(usize, usize)> {
    if num_frames < 5 {
        return Err(Error::Argument(format!("need at least 5 frames to split, got {num_frames}")));
    }
    let p = 2 * num_frames / 5;
    Ok((p, num_frames - p))
}

/// Interval embeddings `[n, D]` of `[T', D, h, w]` frames: spatial mean, then mean over each chunk of `s` frames.
pub fn chunk_intervals<'g, T: Scalar>(frames: Var<'g, T>, s: usize) -> Result<Var<'g, T>> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("interval frames must be [T, D, h, w], got {shape:?}")));
    }
    let (t, d) = (shape[0], shape[1]);
    if s == 0 || t < s {
        return Err(Error::Argument(format!("region of {t} frames is shorter than chunk size {s}")));
    }
    let n = t / s;
    let pooled = frames.reshape([t, d, shape[2] * shape[3]]).mean_axis(2);
    Ok(pooled.narrow(0, 0, n * s).reshape([n, s, d]).mean_axis(1))
}

fn normalize_rows<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    let s = x.shape();
    let eps2 = T::from_f64_lossy(COSINE_EPS * COSINE_EPS);
    let norm = (x * x).sum_axis(1).add_scalar(eps2).sqrt().reshape([s[0], 1]);
    x / norm
}

/// Pairwise similarity `[n, m]` between rows of `a` and `b`.
pub fn similarity<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>, kind: Similarity) -> Var<'g, T> {
    match kind {
        Similarity::Dot => a.matmul_t(b),
        Similarity::Cosine => normalize_rows(a).matmul_t(normalize_rows(b)),
    }
}

/// Soft nearest neighbours `p̃ = softmax(sim(P, Q) / τ) Q` of every template row, with the weights.
pub fn soft_reconstruct<'g, T: Scalar>(
    p: Var<'g, T>,
    q: Var<'g, T>,
    cfg: &CycleConfig,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if q.shape()[0] == 0 {
        return Err(Error::Argument("search set is empty".into()));
    }
    let tau = T::from_f64_lossy(1.0 / cfg.temperature);
    let lambda = similarity(p, q, cfg.similarity).scale(tau).softmax();
    Ok((lambda.matmul(q), lambda))
}

/// Cycle-back logits `sim(p̃, P) / τ`, `[n, n]`; row `k` should peak at column `k`.
pub fn cycle_back_logits<'g, T: Scalar>(p_tilde: Var<'g, T>, p: Var<'g, T>, cfg: &CycleConfig) -> Result<Var<'g, T>> {
    if p.shape()[0] == 0 {
        return Err(Error::Argument("template set is empty".into()));
    }
    Ok(similarity(p_tilde, p, cfg.similarity).scale(T::from_f64_lossy(1.0 / cfg.temperature)))
}

/// Per-interval terms `ℓ_k = -log β_kk` of one view.
pub fn cycle_back_loss<'g, T: Scalar>(
    p_tilde: Var<'g, T>,
    p: Var<'g, T>,
    k: usize,
    cfg: &CycleConfig,
) -> Result<Var<'g, T>> {
    let n = p.shape()[0];
    if k >= n {
        return Err(Error::Argument(format!("source index {k} outside {n} template intervals")));
    }
    let logits = cycle_back_logits(p_tilde.narrow(0, k, 1), p, cfg)?;
    Ok(logits.cross_entropy(&[k]))
}

/// Template and search intervals of one view's `[T, D, h, w]` features.
pub fn template_search<'g, T: Scalar>(
    features: Var<'g, T>,
    cfg: &CycleConfig,
    offset: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let t = features.shape()[0];
    let (p_len, q_len) = split_template_search(t)?;
    let frames = if offset % t == 0 {
        features
    } else {
        let o = offset % t;
        features.graph().concat(&[features.narrow(0, o, t - o), features.narrow(0, 0, o)], 0)
    };
    let p = chunk_intervals(frames.narrow(0, 0, p_len), cfg.chunk_size)?;
    let q = chunk_intervals(frames.narrow(0, p_len, q_len), cfg.chunk_size)?;
    Ok((p, q))
}

/// Mean of `ℓ_k` over views and template intervals (or one random interval per view in single mode).
pub fn dense_cycle_loss<'g, T: Scalar, R: Rng + ?Sized>(
    features: &[Var<'g, T>],
    cfg: &CycleConfig,
    rng: &mut R,
) -> Result<Var<'g, T>> {
    if features.is_empty() {
        return Err(Error::Argument("no views for the cycle loss".into()));
    }
    let mut terms = Vec::with_capacity(features.len());
    for &f in features {
        let t = f.shape()[0];
        let offset = if cfg.random_split && t > 0 { rng.random_range(0..t) } else { 0 };
        let (p, q) = template_search(f, cfg, offset)?;
        let (p_tilde, _) = soft_reconstruct(p, q, cfg)?;
        let n = p.shape()[0];
        let term = match cfg.mode {
            CycleMode::Dense => {
                let targets: Vec<usize> = (0..n).collect();
                cycle_back_logits(p_tilde, p, cfg)?.cross_entropy(&targets)
            }
            CycleMode::Single => cycle_back_loss(p_tilde, p, rng.random_range(0..n), cfg)?,
        };
        terms.push(term);
    }
    let g = features[0].graph();
    Ok(g.stack(&terms, 0).mean())
}

/// Fraction of template intervals whose cycle-back argmax returns to themselves, per view.
pub fn cycle_accuracy<T: Scalar>(features: &[Tensor<T>], cfg: &CycleConfig) -> Result<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            let g = Graph::new();
            let (p, q) = template_search(g.constant(f.clone()), cfg, 0)?;
            let (p_tilde, _) = soft_reconstruct(p, q, cfg)?;
            let logits = cycle_back_logits(p_tilde, p, cfg)?.value();
            let n = p.shape()[0];
            let hits = logits
                .data()
                .chunks(n)
                .enumerate()
                .filter(|(k, row)| {
                    let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                    best == *k
                })
                .count();
            Ok(hits as f64 / n as f64)
        })
        .collect()
}
