//! Synthetic pulsating multi-view cardiac phantom.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    frame_file_name, mask_file_name, write_frame, write_mask, Annotation, AnnotationRecord, BinaryMask, Chamber,
    DatasetManifest, Frame, MaskRecord, MultiViewVideoSample, Resolution, SampleRecord, Split, ViewId, ViewRecord,
    ViewSpec, ViewVideo,
};
use crate::error::{Error, Result};

const BACKGROUND: f64 = 0.32;
const WALL: f64 = 0.92;
const CAVITY: f64 = 0.06;
const WALL_THICKNESS: f64 = 0.025;
/// Peak vertical sway (fraction of height); makes the cycle direction visible.
const SWAY: f64 = 0.015;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 254, val: 2, test: 8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationPlacement {
    /// Frames `round(k * T / N)`.
    #[default]
    Uniform,
    /// Frames nearest end-diastole and end-systole, alternating.
    Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub num_videos: SplitSizes,
    pub frames_per_video: usize,
    pub period: usize,
    pub height: usize,
    pub width: usize,
    pub annotated_frames_per_video: usize,
    pub noise_level: f64,
    /// Chamber area at full contraction relative to full dilation.
    pub contraction_ratio: f64,
    /// Per-video random offset of chamber centres, as a fraction of the image.
    pub jitter: f64,
    pub annotation_placement: AnnotationPlacement,
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            num_videos: SplitSizes::default(),
            frames_per_video: 100,
            period: 30,
            height: 144,
            width: 144,
            annotated_frames_per_video: 5,
            noise_level: 0.3,
            contraction_ratio: 0.6,
            jitter: 0.03,
            annotation_placement: AnnotationPlacement::Uniform,
            rng_seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.period < 4 || self.frames_per_video <= self.period {
            return fail(format!(
                "need frames_per_video > period >= 4, got T={} period={}",
                self.frames_per_video, self.period
            ));
        }
        if self.annotated_frames_per_video > self.frames_per_video {
            return fail(format!(
                "annotated_frames_per_video {} exceeds frames_per_video {}",
                self.annotated_frames_per_video, self.frames_per_video
            ));
        }
        if self.height < 16 || self.width < 16 {
            return fail(format!("resolution {}x{} is too small", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return fail(format!("noise_level {} outside [0, 1]", self.noise_level));
        }
        if !(self.contraction_ratio > 0.0 && self.contraction_ratio <= 1.0) {
            return fail(format!("contraction_ratio {} outside (0, 1]", self.contraction_ratio));
        }
        if !(0.0..0.1).contains(&self.jitter) {
            return fail(format!("jitter {} outside [0, 0.1)", self.jitter));
        }
        Ok(())
    }

    /// Reads a TOML document, or JSON when the file ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = crate::document::read_document(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("phantom config serializes to TOML")
    }

    pub fn resolution(&self) -> Resolution {
        Resolution { height: self.height, width: self.width }
    }
}

/// `fract((t + phase_offset) / period)`.
pub fn cardiac_phase(t: usize, period: f64, phase_offset: f64) -> Result<f64> {
    if period.is_nan() || period <= 0.0 {
        return Err(Error::Argument(format!("period must be positive, got {period}")));
    }
    // reduce t first so t and t + period give bit-identical phases
    let phi = (((t as f64).rem_euclid(period) + phase_offset) / period).rem_euclid(1.0);
    Ok(if phi >= 1.0 { 0.0 } else { phi })
}

/// Relative chamber area at phase `phi` (1 at `phi = 0`, `ratio` at `phi = 0.5`).
pub fn area_scale(phi: f64, ratio: f64) -> f64 {
    1.0 - (1.0 - ratio) * (1.0 - (TAU * phi).cos()) / 2.0
}

/// One chamber as a rotated ellipse in normalized image coordinates `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChamberShape {
    pub chamber: Chamber,
    pub center: (f64, f64),
    /// Semi-axes at full dilation.
    pub axes: (f64, f64),
    pub angle: f64,
    pub wall: f64,
}

impl ChamberShape {
    fn new(chamber: Chamber, center: (f64, f64), axes: (f64, f64)) -> Self {
        Self { chamber, center, axes, angle: 0.0, wall: WALL_THICKNESS }
    }

    /// Ellipse level `((u/a)^2 + (v/b)^2)` of a point, with axes grown by `grow`.
    fn level(&self, center: (f64, f64), axes: (f64, f64), p: (f64, f64), grow: f64) -> f64 {
        let (dy, dx) = (p.0 - center.0, p.1 - center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u / (axes.0 + grow)).powi(2) + (v / (axes.1 + grow)).powi(2)
    }
}

/// Chamber geometry of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLayout {
    pub view_id: ViewId,
    pub chambers: Vec<ChamberShape>,
}

impl ViewLayout {
    pub fn standard(view_id: ViewId) -> Self {
        let chambers = match view_id {
            ViewId::Plvla => vec![
                ChamberShape { angle: 0.08, ..ChamberShape::new(Chamber::Rv, (0.33, 0.5), (0.09, 0.26)) },
                ChamberShape { angle: 0.08, ..ChamberShape::new(Chamber::Lv, (0.62, 0.5), (0.15, 0.28)) },
            ],
            ViewId::Lvsa => vec![
                ChamberShape { wall: 0.07, ..ChamberShape::new(Chamber::Lv, (0.5, 0.58), (0.17, 0.17)) },
                ChamberShape::new(Chamber::Rv, (0.5, 0.22), (0.2, 0.08)),
            ],
            ViewId::A4c => vec![
                ChamberShape::new(Chamber::Rv, (0.3, 0.33), (0.15, 0.13)),
                ChamberShape::new(Chamber::Lv, (0.3, 0.68), (0.16, 0.14)),
                ChamberShape::new(Chamber::Ra, (0.7, 0.3), (0.12, 0.13)),
                ChamberShape::new(Chamber::La, (0.7, 0.68), (0.12, 0.14)),
            ],
        };
        Self { view_id, chambers }
    }

    fn jittered(&self, amount: f64, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        for c in &mut out.chambers {
            c.center.0 += rng.random_range(-amount..=amount);
            c.center.1 += rng.random_range(-amount..=amount);
            let s = 1.0 + rng.random_range(-amount..=amount) * 2.0;
            c.axes = (c.axes.0 * s, c.axes.1 * s);
            c.angle += rng.random_range(-amount..=amount) * 2.0;
        }
        out
    }

    /// Interiors (with walls) stay in the image and never overlap at full dilation.
    fn is_valid(&self) -> bool {
        let n = 96;
        let mut taken = vec![false; n * n];
        for c in &self.chambers {
            let (a, b) = (c.axes.0 + c.wall, c.axes.1 + c.wall);
            let (sin, cos) = c.angle.sin_cos();
            let ext_y = (a * cos).hypot(b * sin) + SWAY;
            let ext_x = (a * sin).hypot(b * cos);
            if c.center.0 < ext_y || c.center.0 + ext_y > 1.0 || c.center.1 < ext_x || c.center.1 + ext_x > 1.0 {
                return false;
            }
            for y in 0..n {
                for x in 0..n {
                    let p = ((y as f64 + 0.5) / n as f64, (x as f64 + 0.5) / n as f64);
                    if c.level(c.center, c.axes, p, 0.0) <= 1.0 {
                        if taken[y * n + x] {
                            return false;
                        }
                        taken[y * n + x] = true;
                    }
                }
            }
        }
        true
    }
}

/// Geometry of all views of one phantom patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomState {
    pub views: Vec<ViewLayout>,
    pub contraction_ratio: f64,
}

impl PhantomState {
    pub fn standard(contraction_ratio: f64) -> Self {
        Self { views: ViewId::ALL.into_iter().map(ViewLayout::standard).collect(), contraction_ratio }
    }

    /// Random per-patient variation of the standard layout.
    pub fn jittered(contraction_ratio: f64, amount: f64, rng: &mut impl Rng) -> Self {
        let base = Self::standard(contraction_ratio);
        let views = base
            .views
            .iter()
            .map(|layout| {
                (0..32)
                    .map(|_| layout.jittered(amount, rng))
                    .find(ViewLayout::is_valid)
                    .unwrap_or_else(|| layout.clone())
            })
            .collect();
        Self { views, contraction_ratio }
    }

    pub fn layout(&self, view_id: ViewId) -> Option<&ViewLayout> {
        self.views.iter().find(|l| l.view_id == view_id)
    }
}

/// Renders one frame of a view and its per-class masks.
pub fn render_view(
    state: &PhantomState,
    phi: f64,
    view: &ViewSpec,
    resolution: Resolution,
    noise_level: f64,
    rng_seed: u64,
) -> Result<(Frame, Vec<BinaryMask>)> {
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::Argument(format!("phase {phi} outside [0, 1)")));
    }
    let layout =
        state.layout(view.view_id).ok_or_else(|| Error::Argument(format!("phantom has no {} layout", view.view_id)))?;
    let shapes: Vec<&ChamberShape> = view
        .class_set
        .iter()
        .map(|&c| {
            layout
                .chambers
                .iter()
                .find(|s| s.chamber == c)
                .ok_or_else(|| Error::Argument(format!("{} layout has no {c}", view.view_id)))
        })
        .collect::<Result<_>>()?;

    let Resolution { height, width } = resolution;
    let k = area_scale(phi, state.contraction_ratio).sqrt();
    let shift = SWAY * (TAU * phi).sin();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pixels = Vec::with_capacity(height * width);
    let mut masks: Vec<BinaryMask> = shapes.iter().map(|_| BinaryMask::empty(height, width)).collect();
    for y in 0..height {
        for x in 0..width {
            let p = ((y as f64 + 0.5) / height as f64, (x as f64 + 0.5) / width as f64);
            let mut value = BACKGROUND;
            let mut inside = None;
            for (i, s) in shapes.iter().enumerate() {
                let center = (s.center.0 + shift, s.center.1);
                let axes = (s.axes.0 * k, s.axes.1 * k);
                if s.level(center, axes, p, 0.0) <= 1.0 {
                    inside = Some(i);
                } else if s.level(center, axes, p, s.wall) <= 1.0 && inside.is_none() {
                    value = WALL;
                }
            }
            if let Some(i) = inside {
                value = CAVITY;
                masks[i].bits[y * width + x] = true;
            }
            if noise_level > 0.0 {
                value *= 1.0 + noise_level * rng.random_range(-1.0..1.0);
            }
            pixels.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((Frame::new(height, width, pixels)?, masks))
}

/// SplitMix64 finalizer; derives independent child seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent stream under `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

fn annotated_indices(config: &PhantomConfig, n: usize, phase_offset: f64) -> Vec<usize> {
    let t = config.frames_per_video;
    if n >= t {
        return (0..t).collect();
    }
    match config.annotation_placement {
        AnnotationPlacement::Uniform => {
            let mut v: Vec<usize> = (0..n).map(|k| ((k * t) as f64 / n as f64).round() as usize).collect();
            v.dedup();
            v
        }
        AnnotationPlacement::Phase => {
            // phase is 0 or 0.5 at t = j * period / 2 - offset
            let half = config.period as f64 / 2.0;
            let first = (phase_offset / half).ceil() as usize;
            let mut v: Vec<usize> =
                (first..).map(|j| (j as f64 * half - phase_offset).round() as usize).take_while(|&i| i < t).collect();
            v.dedup();
            v.truncate(n);
            let mut k = 0;
            while v.len() < n {
                if !v.contains(&k) {
                    v.push(k);
                }
                k += 1;
            }
            v.sort_unstable();
            v
        }
    }
}

/// Video `index` of the dataset, entirely in memory.
pub fn synthesize_video(
    config: &PhantomConfig,
    id: &str,
    index: u64,
    annotated: usize,
) -> Result<MultiViewVideoSample> {
    let seed = child_seed(config.rng_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase_offset = rng.random_range(0.0..config.period as f64);
    let state = PhantomState::jittered(config.contraction_ratio, config.jitter, &mut rng);
    let frames_seed = rng.random::<u64>();
    let annotated = annotated_indices(config, annotated, phase_offset);
    let mut views = Vec::with_capacity(3);
    for (vi, spec) in ViewSpec::standard_roster().into_iter().enumerate() {
        let mut frames = Vec::with_capacity(config.frames_per_video);
        let mut annotations = Vec::with_capacity(annotated.len());
        for t in 0..config.frames_per_video {
            let phi = cardiac_phase(t, config.period as f64, phase_offset)?;
            let noise_seed = child_seed(frames_seed, (vi * config.frames_per_video + t) as u64);
            let (frame, masks) = render_view(&state, phi, &spec, config.resolution(), config.noise_level, noise_seed)?;
            frames.push(frame);
            if annotated.binary_search(&t).is_ok() {
                annotations.push(Annotation { frame_index: t, masks });
            }
        }
        views.push(ViewVideo { spec, frames, annotations });
    }
    Ok(MultiViewVideoSample::new(id, views)?)
}

struct Job {
    split: Split,
    id: String,
    index: u64,
    annotated: usize,
}

fn jobs(config: &PhantomConfig) -> Vec<Job> {
    let sizes = config.num_videos;
    let mut out = Vec::new();
    for (split, count) in [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)] {
        for i in 0..count {
            let annotated =
                if split == Split::Train { config.annotated_frames_per_video } else { config.frames_per_video };
            out.push(Job { split, id: format!("{split}_{i:04}"), index: out.len() as u64, annotated });
        }
    }
    out
}

/// All videos of the configured dataset in memory, with their splits.
pub fn synthesize_dataset(config: &PhantomConfig) -> Result<Vec<(Split, MultiViewVideoSample)>> {
    config.validate()?;
    jobs(config).par_iter().map(|j| Ok((j.split, synthesize_video(config, &j.id, j.index, j.annotated)?))).collect()
}

fn write_video(out_dir: &Path, split: Split, sample: &MultiViewVideoSample) -> Result<SampleRecord> {
    let mut views = Vec::new();
    for v in sample.views() {
        let rel = PathBuf::from(&sample.patient_id).join(v.spec.view_id.as_str());
        let dir = out_dir.join(&rel);
        for (t, f) in v.frames.iter().enumerate() {
            write_frame(&dir.join(frame_file_name(t)), f)?;
        }
        let mut annotations = Vec::new();
        for a in &v.annotations {
            let mut masks = Vec::new();
            for (&class, m) in v.spec.class_set.iter().zip(&a.masks) {
                let path = rel.join(mask_file_name(a.frame_index, class));
                write_mask(&out_dir.join(&path), m)?;
                masks.push(MaskRecord { class, path });
            }
            annotations.push(AnnotationRecord { frame_index: a.frame_index, masks });
        }
        views.push(ViewRecord { view_id: v.spec.view_id, frame_dir: rel, annotations });
    }
    Ok(SampleRecord { id: sample.patient_id.clone(), split, num_frames: sample.num_frames(), views })
}

/// Writes frames, masks and `manifest.json` under `out_dir`.
pub fn generate_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = jobs(config)
        .par_iter()
        .map(|j| {
            let sample = synthesize_video(config, &j.id, j.index, j.annotated)?;
            write_video(out_dir, j.split, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(ViewSpec::standard_roster(), config.resolution(), out_dir);
    manifest.samples = records;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
