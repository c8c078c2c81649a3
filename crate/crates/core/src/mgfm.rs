//! View-wise concatenation and per-frame attention over all view positions.

use glfusion_tensor::nn::{Bound, Init, Linear, ParamStore};
use glfusion_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Query/key/value width; `None` means `D / 2`.
    pub d_k: Option<usize>,
    /// Softmax temperature; `None` means `sqrt(d_k / heads)`.
    pub temperature: Option<f64>,
    pub residual: bool,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_k: None, temperature: None, residual: true, heads: 1 }
    }
}

impl AttentionConfig {
    pub fn resolved_d_k(&self, channels: usize) -> usize {
        self.d_k.unwrap_or(channels / 2).max(1)
    }

    pub fn resolved_temperature(&self, channels: usize) -> f64 {
        let d_head = self.resolved_d_k(channels) / self.heads.max(1);
        self.temperature.unwrap_or((d_head as f64).sqrt())
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let d_k = self.resolved_d_k(channels);
        if self.heads == 0 || d_k % self.heads != 0 {
            return Err(Error::Config(format!("d_k {d_k} is not divisible by {} heads", self.heads)));
        }
        let tau = self.resolved_temperature(channels);
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("attention temperature {tau} must be positive")));
        }
        Ok(())
    }
}

/// Stacks `[T, D, h, w]` volumes into `[T, V, D, h, w]`.
pub fn view_concat<'g, T: Scalar>(features: &[Var<'g, T>], expected_views: usize) -> Result<Var<'g, T>> {
    if features.len() != expected_views {
        return Err(Error::Argument(format!("expected {expected_views} views, got {}", features.len())));
    }
    let first = features[0].shape();
    if first.len() != 4 {
        return Err(Error::Shape(format!("view features must be [T, D, h, w], got {first:?}")));
    }
    for (i, f) in features.iter().enumerate() {
        if f.shape() != first {
            return Err(Error::Shape(format!("view {i} has shape {:?}, view 0 has {first:?}", f.shape())));
        }
    }
    Ok(features[0].graph().stack(features, 1))
}

/// Inverse of [`view_concat`].
pub fn view_unstack<'g, T: Scalar>(stacked: Var<'g, T>) -> Vec<Var<'g, T>> {
    let s = stacked.shape();
    (0..s[1]).map(|v| stacked.narrow(1, v, 1).reshape([s[0], s[2], s[3], s[4]])).collect()
}

/// Single non-local block over the `V*h*w` tokens of each frame.
#[derive(Clone, Debug)]
pub struct ViewAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
    d_k: usize,
    temperature: f64,
    residual: bool,
}

impl ViewAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d_k = cfg.resolved_d_k(channels);
        Self {
            query: Linear::new(store, &format!("{prefix}.query"), channels, d_k, Init::Xavier, rng),
            key: Linear::new(store, &format!("{prefix}.key"), channels, d_k, Init::Xavier, rng),
            value: Linear::new(store, &format!("{prefix}.value"), channels, d_k, Init::Xavier, rng),
            out: Linear::new(store, &format!("{prefix}.out"), d_k, channels, Init::Zeros, rng),
            heads: cfg.heads.max(1),
            d_k,
            temperature: cfg.resolved_temperature(channels),
            residual: cfg.residual,
        }
    }

    /// Attention over `[T, V, D, h, w]`; returns the fused volume and the `[T, heads, N, N]` weights.
    pub fn forward_with_weights<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        stacked: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = stacked.shape();
        if s.len() != 5 {
            return Err(Error::Shape(format!("stacked views must be [T, V, D, h, w], got {s:?}")));
        }
        if !stacked.value().all_finite() {
            return Err(Error::Numeric("non-finite attention input".into()));
        }
        let (t, v, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let n = v * h * w;
        let (heads, dh) = (self.heads, self.d_k / self.heads);
        let tokens = stacked.permute(&[0, 1, 3, 4, 2]).reshape([t, n, d]);
        let split = |x: Var<'g, T>| x.reshape([t, n, heads, dh]).permute(&[0, 2, 1, 3]).reshape([t * heads, n, dh]);
        let q = split(self.query.forward(p, tokens));
        let k = split(self.key.forward(p, tokens));
        let val = split(self.value.forward(p, tokens));
        let weights = q.scale(T::from_f64_lossy(1.0 / self.temperature)).matmul_t(k).softmax();
        let read = weights.matmul(val).reshape([t, heads, n, dh]).permute(&[0, 2, 1, 3]).reshape([t, n, self.d_k]);
        let mut out = self.out.forward(p, read);
        if self.residual {
            out = out + tokens;
        }
        let fused = out.reshape([t, v, h, w, d]).permute(&[0, 1, 4, 2, 3]);
        Ok((fused, weights.reshape([t, heads, n, n])))
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, stacked: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(p, stacked)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgfmConfig {
    pub enabled: bool,
    pub layers: usize,
    pub attention: AttentionConfig,
}

impl Default for MgfmConfig {
    fn default() -> Self {
        Self { enabled: true, layers: 1, attention: AttentionConfig::default() }
    }
}

/// Global fusion: `layers` stacked view-wise attention blocks.
#[derive(Clone, Debug)]
pub struct Mgfm {
    blocks: Vec<ViewAttention>,
    views: usize,
}

impl Mgfm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        views: usize,
        cfg: &MgfmConfig,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..cfg.layers.max(1))
            .map(|i| ViewAttention::new(store, &format!("{prefix}.block{i}"), channels, &cfg.attention, rng))
            .collect();
        Self { blocks, views }
    }

    /// Per-view `F̄_global` from per-view encoder features.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, features: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        let mut x = view_concat(features, self.views)?;
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        Ok(view_unstack(x))
    }
}

/// Attention weights of a block evaluated without gradients, `[T, heads, N, N]`.
pub fn attention_weights<T: Scalar>(
    block: &ViewAttention,
    store: &ParamStore<T>,
    stacked: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = glfusion_tensor::Graph::new();
    let p = store.bind_frozen(&g);
    let (_, w) = block.forward_with_weights(&p, g.constant(stacked.clone()))?;
    Ok((*w.value()).clone())
}
