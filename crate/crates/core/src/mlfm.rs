//! Local fusion: foreground masks from pseudo labels and center weights, then view-wise attention.

use glfusion_tensor::nn::{Bound, Conv2d, Init, ParamStore};
use glfusion_tensor::{Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgfm::{view_concat, view_unstack, AttentionConfig, ViewAttention};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    /// `σ(a · b)`, confined to `(0.5, σ(1))`.
    #[default]
    Literal,
    /// `a · b`, confined to `(0, 1)`.
    Unbounded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    #[default]
    Sum,
    ConcatProject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlfmConfig {
    pub enabled: bool,
    pub variant: MaskVariant,
    pub combine: Combine,
    /// Stop gradients through the pseudo labels.
    pub detach_pseudo: bool,
    pub attention: AttentionConfig,
}

impl Default for MlfmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            variant: MaskVariant::Literal,
            combine: Combine::Sum,
            detach_pseudo: false,
            attention: AttentionConfig::default(),
        }
    }
}

/// Class-wise max of `σ(logits)`, average-pooled by `stride`: `[T, C, H, W] -> [T, 1, H/s, W/s]`.
fn pooled_foreground<'g, T: Scalar>(logits: Var<'g, T>, stride: usize) -> Var<'g, T> {
    let s = logits.shape();
    logits.sigmoid().max_axis(1).reshape([s[0], 1, s[2], s[3]]).avg_pool(stride)
}

/// Single-channel feature-grid mask `[T, 1, H/stride, W/stride]`.
pub fn compute_feature_mask<'g, T: Scalar>(
    pseudo_logits: Var<'g, T>,
    center_logits: Var<'g, T>,
    stride: usize,
    variant: MaskVariant,
) -> Result<Var<'g, T>> {
    let (ps, cs) = (pseudo_logits.shape(), center_logits.shape());
    if ps != cs || ps.len() != 4 {
        return Err(Error::Shape(format!("pseudo logits {ps:?} and center logits {cs:?} must match as [T, C, H, W]")));
    }
    if ps[2] % stride != 0 || ps[3] % stride != 0 {
        return Err(Error::Shape(format!("{}x{} is not divisible by stride {stride}", ps[2], ps[3])));
    }
    let ab = pooled_foreground(pseudo_logits, stride) * pooled_foreground(center_logits, stride);
    Ok(match variant {
        MaskVariant::Literal => ab.sigmoid(),
        MaskVariant::Unbounded => ab,
    })
}

/// Masked view-wise attention producing per-view `F̄_local`.
#[derive(Clone, Debug)]
pub struct Mlfm {
    attention: ViewAttention,
    views: usize,
}

impl Mlfm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        views: usize,
        cfg: &MlfmConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            attention: ViewAttention::new(store, &format!("{prefix}.attention"), channels, &cfg.attention, rng),
            views,
        }
    }

    pub fn attention(&self) -> &ViewAttention {
        &self.attention
    }

    /// Multiplies each view by its mask, stacks, and attends.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        features: &[Var<'g, T>],
        masks: &[Var<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        Ok(view_unstack(self.attention.forward(p, self.masked_stack(features, masks)?)?))
    }

    /// Masked features stacked as `[T, V, D, h, w]`.
    pub fn masked_stack<'g, T: Scalar>(&self, features: &[Var<'g, T>], masks: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        if masks.len() != features.len() {
            return Err(Error::Argument(format!("{} masks for {} views", masks.len(), features.len())));
        }
        let mut masked = Vec::with_capacity(features.len());
        for (i, (&f, &m)) in features.iter().zip(masks).enumerate() {
            let (fs, ms) = (f.shape(), m.shape());
            if ms.len() != 4 || ms[1] != 1 || fs.len() != 4 || ms[0] != fs[0] || ms[2..] != fs[2..] {
                return Err(Error::Shape(format!("view {i}: mask {ms:?} is not on the grid of features {fs:?}")));
            }
            masked.push(f * m);
        }
        view_concat(&masked, self.views)
    }
}

/// Merges global and local features of each view.
#[derive(Clone, Debug)]
pub enum Combiner {
    Sum,
    ConcatProject(Vec<Conv2d>),
}

impl Combiner {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        view_names: &[&str],
        channels: usize,
        combine: Combine,
        rng: &mut R,
    ) -> Self {
        match combine {
            Combine::Sum => Combiner::Sum,
            Combine::ConcatProject => Combiner::ConcatProject(
                view_names
                    .iter()
                    .map(|v| {
                        Conv2d::new(store, &format!("{v}.combine"), 2 * channels, channels, 1, 1, 1, Init::Xavier, rng)
                    })
                    .collect(),
            ),
        }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        global: &[Var<'g, T>],
        local: &[Var<'g, T>],
    ) -> Vec<Var<'g, T>> {
        match self {
            Combiner::Sum => global.iter().zip(local).map(|(&g, &l)| g + l).collect(),
            Combiner::ConcatProject(convs) => global
                .iter()
                .zip(local)
                .zip(convs)
                .map(|((&g, &l), c)| c.forward(p, g.graph().concat(&[g, l], 1)))
                .collect(),
        }
    }
}
