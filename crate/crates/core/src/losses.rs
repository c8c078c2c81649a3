//! Supervised segmentation loss, center-head target and the total objective.

use std::rc::Rc;

use glfusion_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the cycle loss.
    pub alpha: f64,
    /// Weight of the center-head auxiliary loss.
    pub center_aux: f64,
    /// Divide the segmentation loss by the number of annotated view-frames.
    pub normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, center_aux: 0.1, normalize: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.center_aux >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha={} center_aux={}",
                self.alpha, self.center_aux
            )));
        }
        Ok(())
    }
}

/// A segmentation loss plus a flag raised when there was nothing to supervise.
pub struct SegLoss<'g, T: Scalar> {
    pub value: Var<'g, T>,
    pub empty: bool,
}

/// `Σ_views Σ_frames mean-BCE(frame)` over `[N_v, C, H, W]` logits and `{0, 1}` targets.
pub fn seg_loss<'g, T: Scalar>(
    graph: &'g Graph<T>,
    predictions: &[Var<'g, T>],
    targets: &[Rc<Tensor<T>>],
    normalize: bool,
) -> Result<SegLoss<'g, T>> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let mut terms = Vec::new();
    let mut frames = 0;
    for (i, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("view {i}: logits {:?} vs targets {:?}", p.shape(), t.shape())));
        }
        let n = p.shape().first().copied().unwrap_or(0);
        if n == 0 || p.value().is_empty() {
            continue;
        }
        frames += n;
        terms.push(p.bce_with_logits(Rc::clone(t)).scale(T::from_usize_lossy(n)));
    }
    if terms.is_empty() {
        log::warn!("segmentation loss over an empty annotation set");
        return Ok(SegLoss { value: graph.constant(Tensor::scalar(T::zero())), empty: true });
    }
    let mut value = graph.stack(&terms, 0).sum();
    if normalize {
        value = value.scale(T::one() / T::from_usize_lossy(frames));
    }
    Ok(SegLoss { value, empty: false })
}

/// `L_seg + α L_cyc + λ_c L_center`, skipping absent terms.
pub fn total_loss<'g, T: Scalar>(
    seg: Var<'g, T>,
    cyc: Option<Var<'g, T>>,
    center: Option<Var<'g, T>>,
    weights: &LossWeights,
) -> Var<'g, T> {
    let mut total = seg;
    if let Some(c) = cyc {
        if weights.alpha != 0.0 {
            total = total + c.scale(T::from_f64_lossy(weights.alpha));
        }
    }
    if let Some(c) = center {
        if weights.center_aux != 0.0 {
            total = total + c.scale(T::from_f64_lossy(weights.center_aux));
        }
    }
    total
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k: Option<usize> = None;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let Some(mut j) = k else {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = Some(0);
            continue;
        };
        // z[0] is -inf, so this stops at j = 0
        let s = loop {
            let p = v[j];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s > z[j] {
                break s;
            }
            j -= 1;
        };
        j += 1;
        v[j] = q;
        z[j] = s;
        z[j + 1] = f64::INFINITY;
        k = Some(j);
    }
    if k.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Euclidean distance from each foreground pixel to the nearest background pixel (outside the image counts as background).
pub fn distance_to_background(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height + 2, mask.width + 2);
    let mut g = vec![0.0; h * w];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                g[(y + 1) * w + x + 1] = f64::INFINITY;
            }
        }
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            g[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&g[y * w..(y + 1) * w], &mut row);
        g[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let mut out = Vec::with_capacity(mask.height * mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            out.push(g[(y + 1) * w + x + 1].sqrt());
        }
    }
    out
}

/// `dt / max(dt)` inside the mask, 0 outside.
pub fn center_target(mask: &BinaryMask) -> Vec<f64> {
    let dt = distance_to_background(mask);
    let max = dt.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return dt;
    }
    dt.into_iter().map(|d| d / max).collect()
}
