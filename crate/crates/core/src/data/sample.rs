use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::types::{Annotation, BinaryMask, Frame, ViewId, ViewSpec};
use super::DataError;

/// One view's video with its sparse annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewVideo {
    pub spec: ViewSpec,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Annotation>,
}

/// Temporally aligned videos of one patient, one per view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiViewVideoSample {
    pub patient_id: String,
    views: Vec<ViewVideo>,
}

impl MultiViewVideoSample {
    pub fn new(patient_id: impl Into<String>, views: Vec<ViewVideo>) -> Result<Self, DataError> {
        let sample = Self { patient_id: patient_id.into(), views };
        sample.validate()?;
        Ok(sample)
    }

    fn validate(&self) -> Result<(), DataError> {
        let specs: Vec<ViewSpec> = self.views.iter().map(|v| v.spec.clone()).collect();
        super::types::validate_roster(&specs)?;
        let Some(first) = self.views.first() else {
            return Err(DataError::Schema("sample has no views".into()));
        };
        let t = first.frames.len();
        for view in &self.views {
            let id = view.spec.view_id;
            if view.frames.len() != t {
                return Err(DataError::Schema(format!(
                    "{}: view {id} has {} frames, expected {t}",
                    self.patient_id,
                    view.frames.len()
                )));
            }
            let (h, w) = view.frames.first().map(|f| (f.height, f.width)).unwrap_or((0, 0));
            if view.frames.iter().any(|f| f.height != h || f.width != w) {
                return Err(DataError::Schema(format!("{}: view {id} mixes frame sizes", self.patient_id)));
            }
            let mut prev: Option<usize> = None;
            for ann in &view.annotations {
                if ann.frame_index >= t || prev.is_some_and(|p| p >= ann.frame_index) {
                    return Err(DataError::Schema(format!(
                        "{}: view {id} annotation indices must be strictly increasing and < {t}",
                        self.patient_id
                    )));
                }
                prev = Some(ann.frame_index);
                if ann.masks.len() != view.spec.num_classes() {
                    return Err(DataError::Schema(format!(
                        "{}: view {id} frame {} has {} masks for {} classes",
                        self.patient_id,
                        ann.frame_index,
                        ann.masks.len(),
                        view.spec.num_classes()
                    )));
                }
                if ann.masks.iter().any(|m| m.height != h || m.width != w) {
                    return Err(DataError::Schema(format!(
                        "{}: view {id} frame {} mask size differs from frame size",
                        self.patient_id, ann.frame_index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn views(&self) -> &[ViewVideo] {
        &self.views
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Frame count shared by every view.
    pub fn num_frames(&self) -> usize {
        self.views.first().map_or(0, |v| v.frames.len())
    }

    pub fn view(&self, view_id: ViewId) -> Result<&ViewVideo, DataError> {
        self.views
            .iter()
            .find(|v| v.spec.view_id == view_id)
            .ok_or_else(|| DataError::Lookup(format!("{} has no {view_id} view", self.patient_id)))
    }

    /// Annotated `(frame, masks)` pairs of one view in frame order.
    pub fn annotated_pairs(&self, view_id: ViewId) -> Result<Vec<(&Frame, &[BinaryMask])>, DataError> {
        let view = self.view(view_id)?;
        Ok(view.annotations.iter().map(|a| (&view.frames[a.frame_index], a.masks.as_slice())).collect())
    }

    /// Frame indices annotated in every view.
    pub fn common_annotated_frames(&self) -> Vec<usize> {
        let Some(first) = self.views.first() else { return Vec::new() };
        first
            .annotations
            .iter()
            .map(|a| a.frame_index)
            .filter(|&t| self.views.iter().all(|v| v.annotations.iter().any(|a| a.frame_index == t)))
            .collect()
    }

    /// All views restricted to frames `[start, start + length)`.
    pub fn slice(&self, start: usize, length: usize) -> Result<Self, DataError> {
        let t = self.num_frames();
        if start + length > t {
            return Err(DataError::Argument(format!("window [{start}, {}) exceeds {t} frames", start + length)));
        }
        let views = self
            .views
            .iter()
            .map(|v| ViewVideo {
                spec: v.spec.clone(),
                frames: v.frames[start..start + length].to_vec(),
                annotations: v
                    .annotations
                    .iter()
                    .filter(|a| a.frame_index >= start && a.frame_index < start + length)
                    .map(|a| Annotation { frame_index: a.frame_index - start, masks: a.masks.clone() })
                    .collect(),
            })
            .collect();
        Ok(Self { patient_id: self.patient_id.clone(), views })
    }

    /// A random contiguous window of `length` frames, the same for every view.
    pub fn sample_clip(&self, length: usize, rng_seed: u64) -> Result<Self, DataError> {
        let t = self.num_frames();
        if length > t {
            return Err(DataError::Argument(format!("clip length {length} exceeds {t} frames")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let start = rng.random_range(0..=t - length);
        self.slice(start, length)
    }

    /// Start frame [`sample_clip`](Self::sample_clip) would pick.
    pub fn clip_start(num_frames: usize, length: usize, rng_seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.random_range(0..=num_frames - length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::ViewSpec;

    fn toy(t: usize, annotated: &[usize]) -> MultiViewVideoSample {
        let views = ViewSpec::standard_roster()
            .into_iter()
            .map(|spec| {
                let frames = (0..t).map(|i| Frame::new(2, 2, vec![i as u8; 4]).unwrap()).collect();
                let annotations = annotated
                    .iter()
                    .map(|&i| Annotation { frame_index: i, masks: vec![BinaryMask::empty(2, 2); spec.num_classes()] })
                    .collect();
                ViewVideo { spec, frames, annotations }
            })
            .collect();
        MultiViewVideoSample::new("toy", views).unwrap()
    }

    #[test]
    fn annotated_pairs_in_order() {
        let s = toy(50, &[0, 10, 20, 30, 40]);
        let pairs = s.annotated_pairs(ViewId::A4c).unwrap();
        assert_eq!(pairs.len(), 5);
        let firsts: Vec<u8> = pairs.iter().map(|(f, _)| f.pixels[0]).collect();
        assert_eq!(firsts, vec![0, 10, 20, 30, 40]);
        assert!(pairs.iter().all(|(_, m)| m.len() == 4));
        assert!(s.annotated_pairs(ViewId::Plvla).unwrap().iter().all(|(_, m)| m.len() == 2));
    }

    #[test]
    fn no_annotations_gives_empty_list() {
        assert!(toy(10, &[]).annotated_pairs(ViewId::Lvsa).unwrap().is_empty());
    }

    #[test]
    fn fully_annotated_sample() {
        let all: Vec<usize> = (0..100).collect();
        assert_eq!(toy(100, &all).annotated_pairs(ViewId::Plvla).unwrap().len(), 100);
    }

    #[test]
    fn missing_view_is_lookup_error() {
        let mut s = toy(5, &[1]);
        s.views.truncate(2);
        assert!(matches!(s.annotated_pairs(ViewId::A4c), Err(DataError::Lookup(_))));
    }

    #[test]
    fn rejects_unaligned_views() {
        let mut s = toy(5, &[]);
        s.views[1].frames.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_unsorted_annotations() {
        let mut s = toy(5, &[1, 3]);
        s.views[0].annotations.swap(0, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn clip_window_shared_across_views() {
        let s = toy(100, &[5, 45, 70]);
        for seed in 0..20 {
            let c = s.sample_clip(40, seed).unwrap();
            assert_eq!(c.num_frames(), 40);
            let start = c.views[0].frames[0].pixels[0] as usize;
            assert!(start <= 60);
            for v in c.views() {
                assert_eq!(v.frames[0].pixels[0] as usize, start);
                for a in &v.annotations {
                    assert_eq!(v.frames[a.frame_index].pixels[0] as usize, a.frame_index + start);
                }
            }
            assert_eq!(c, s.sample_clip(40, seed).unwrap());
        }
    }

    #[test]
    fn full_length_clip_is_identity() {
        let s = toy(12, &[0, 11]);
        assert_eq!(s.sample_clip(12, 3).unwrap(), s);
    }

    #[test]
    fn clip_longer_than_video_fails() {
        assert!(matches!(toy(10, &[]).sample_clip(11, 0), Err(DataError::Argument(_))));
    }
}
