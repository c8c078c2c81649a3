use std::path::{Path, PathBuf};

use glfusion_tensor::Scalar;
use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::CropWindow;
use crate::data::{BinaryMask, DatasetManifest, Frame, MultiViewVideoSample, Split, ViewSpec};
use crate::error::{Error, Result};
use crate::metrics::{binarize, DiceAccumulator, DiceReport};
use crate::model::{frames_to_tensor, GlFusion};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub resize: usize,
    pub crop: usize,
    /// Frames per forward pass.
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlayOptions {
    pub dir: PathBuf,
    /// Write every n-th frame.
    pub every: usize,
}

/// A preprocessed video: frames per view and, where annotated, the masks.
#[derive(Clone, Debug)]
pub struct EvalClip {
    pub sample_id: String,
    /// `[view][frame]`.
    pub frames: Vec<Vec<Frame>>,
    /// `[view][frame]`, one mask per class.
    pub truth: Vec<Vec<Option<Vec<BinaryMask>>>>,
}

impl EvalClip {
    pub fn prepare(sample: &MultiViewVideoSample, window: &CropWindow) -> Self {
        let t = sample.num_frames();
        let frames = sample.views().iter().map(|v| v.frames.iter().map(|f| window.frame(f)).collect()).collect();
        let truth = sample
            .views()
            .iter()
            .map(|v| {
                let mut per_frame = vec![None; t];
                for a in &v.annotations {
                    per_frame[a.frame_index] = Some(a.masks.iter().map(|m| window.mask(m)).collect());
                }
                per_frame
            })
            .collect();
        Self { sample_id: sample.patient_id.clone(), frames, truth }
    }
}

/// Anything that turns a clip into per-class masks, `[view][frame][class]`.
pub trait Segmenter: Sync {
    fn segment(&self, clip: &EvalClip, chunk: usize) -> Result<Vec<Vec<Vec<BinaryMask>>>>;
}

impl<T: Scalar> Segmenter for GlFusion<T> {
    fn segment(&self, clip: &EvalClip, chunk: usize) -> Result<Vec<Vec<Vec<BinaryMask>>>> {
        let inputs = clip
            .frames
            .iter()
            .map(|fs| frames_to_tensor::<T>(&fs.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.predict(&inputs, chunk)?;
        Ok(logits
            .iter()
            .map(|l| {
                let (t, c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2], l.shape()[3]);
                (0..t)
                    .map(|i| (0..c).map(|k| binarize(h, w, &l.data()[(i * c + k) * h * w..][..h * w])).collect())
                    .collect()
            })
            .collect())
    }
}

/// Returns the ground truth wherever it exists and empty masks elsewhere.
#[derive(Clone, Debug)]
pub struct OracleSegmenter {
    pub views: Vec<ViewSpec>,
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, clip: &EvalClip, _chunk: usize) -> Result<Vec<Vec<Vec<BinaryMask>>>> {
        Ok(clip
            .truth
            .iter()
            .zip(&clip.frames)
            .zip(&self.views)
            .map(|((truth, frames), spec)| {
                truth
                    .iter()
                    .zip(frames)
                    .map(|(t, f)| {
                        t.clone().unwrap_or_else(|| vec![BinaryMask::empty(f.height, f.width); spec.num_classes()])
                    })
                    .collect()
            })
            .collect())
    }
}

/// Every frame of every view carries masks.
pub fn is_fully_annotated(sample: &MultiViewVideoSample) -> bool {
    let t = sample.num_frames();
    sample.views().iter().all(|v| v.annotations.len() == t)
}

/// Dice over every frame of every fully annotated video.
pub fn evaluate_samples<S: Segmenter + ?Sized>(
    segmenter: &S,
    samples: &[MultiViewVideoSample],
    settings: &EvalSettings,
    overlays: Option<&OverlayOptions>,
) -> Result<DiceReport> {
    let Some(first) = samples.first() else {
        return Err(Error::Config("evaluation split is empty".into()));
    };
    let views: Vec<ViewSpec> = first.views().iter().map(|v| v.spec.clone()).collect();
    let used: Vec<&MultiViewVideoSample> = samples.iter().filter(|s| is_fully_annotated(s)).collect();
    if used.len() < samples.len() {
        log::warn!("skipping {} videos that are not fully annotated", samples.len() - used.len());
    }
    if used.is_empty() {
        return Err(Error::Config("no fully annotated video to evaluate".into()));
    }
    let window = CropWindow::center(settings.resize, settings.crop)?;
    let results: Vec<Result<(EvalClip, Vec<Vec<Vec<BinaryMask>>>)>> = used
        .par_iter()
        .map(|s| {
            let clip = EvalClip::prepare(s, &window);
            let pred = segmenter.segment(&clip, settings.chunk)?;
            Ok((clip, pred))
        })
        .collect();
    let mut acc = DiceAccumulator::new(&views);
    for r in results {
        let (clip, pred) = r?;
        if pred.len() != views.len() {
            return Err(Error::Shape(format!("segmenter returned {} views for {}", pred.len(), views.len())));
        }
        for (v, (pv, tv)) in pred.iter().zip(&clip.truth).enumerate() {
            for (t, (p, truth)) in pv.iter().zip(tv).enumerate() {
                if let Some(truth) = truth {
                    acc.add_frame(v, p, truth)?;
                }
                if let Some(o) = overlays {
                    if t % o.every.max(1) == 0 {
                        let path =
                            o.dir.join(&clip.sample_id).join(views[v].view_id.as_str()).join(format!("{t:05}.png"));
                        write_overlay(&clip.frames[v][t], p, truth.as_deref(), &views[v], &path)?;
                    }
                }
            }
        }
    }
    Ok(acc.finish())
}

/// Prediction filled in the class colour over the frame, ground-truth outline in white.
pub fn write_overlay(
    frame: &Frame,
    pred: &[BinaryMask],
    truth: Option<&[BinaryMask]>,
    spec: &ViewSpec,
    path: &Path,
) -> Result<()> {
    let (h, w) = (frame.height, frame.width);
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = frame.get(y as usize, x as usize);
        Rgb([v, v, v])
    });
    for (mask, class) in pred.iter().zip(&spec.class_set) {
        let c = class.colour();
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let p = img.get_pixel_mut(x as u32, y as u32);
                    for k in 0..3 {
                        p.0[k] = ((p.0[k] as u16 + c[k] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    for mask in truth.unwrap_or_default() {
        for y in 0..h {
            for x in 0..w {
                let edge = mask.get(y, x)
                    && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || {
                        !(mask.get(y - 1, x) && mask.get(y + 1, x) && mask.get(y, x - 1) && mask.get(y, x + 1))
                    });
                if edge {
                    img.put_pixel(x as u32, y as u32, Rgb([255, 255, 255]));
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub settings: EvalSettings,
    pub dice: DiceReport,
}

/// Evaluates a checkpoint on one manifest split; `settings` overrides the preprocessing stored in the checkpoint.
pub fn evaluate(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    split: Split,
    settings: Option<EvalSettings>,
    overlays: Option<&OverlayOptions>,
) -> Result<EvalReport> {
    let model = GlFusion::<f32>::load_checkpoint(checkpoint)?;
    if model.config().views != manifest.views {
        return Err(Error::Format(format!(
            "checkpoint {} was trained on a different view roster",
            checkpoint.display()
        )));
    }
    let settings = match (settings, model.input_spec()) {
        (Some(s), _) => s,
        (None, Some(i)) => EvalSettings { resize: i.resize, crop: i.crop, chunk: 16 },
        (None, None) => EvalSettings { resize: 144, crop: 112, chunk: 16 },
    };
    let samples = manifest.load_split(split)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    let dice = evaluate_samples(&model, &samples, &settings, overlays)?;
    Ok(EvalReport { checkpoint: checkpoint.to_path_buf(), split, settings, dice })
}
