use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_frame, read_mask};
use super::sample::{MultiViewVideoSample, ViewVideo};
use super::types::{validate_roster, Annotation, Chamber, ViewId, ViewSpec};
use super::DataError;

pub const MANIFEST_FORMAT: &str = "glfusion-manifest/v1";

/// Number of views every record must carry.
const NUM_VIEWS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Lookup(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub class: Chamber,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame_index: usize,
    pub masks: Vec<MaskRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: ViewId,
    /// Directory holding `00000.png`, `00001.png`, ...
    pub frame_dir: PathBuf,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub num_frames: usize,
    pub views: Vec<ViewRecord>,
}

impl SampleRecord {
    /// True when every frame of every view is annotated.
    pub fn fully_annotated(&self) -> bool {
        self.views.iter().all(|v| v.annotations.len() == self.num_frames)
    }
}

/// Index of a multi-view dataset on disk. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub views: Vec<ViewSpec>,
    pub resolution: Resolution,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub fn frame_file_name(t: usize) -> String {
    format!("{t:05}.png")
}

pub fn mask_file_name(t: usize, class: Chamber) -> String {
    format!("{t:05}_{class}.png")
}

/// Reads, validates and checks every referenced file of a manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::io(path, e),
    })?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    manifest.check_files()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn new(views: Vec<ViewSpec>, resolution: Resolution, root: impl Into<PathBuf>) -> Self {
        Self { format: MANIFEST_FORMAT.to_string(), views, resolution, samples: Vec::new(), root: root.into() }
    }

    /// Checks the structural invariants (no filesystem access).
    pub fn validate(&self) -> Result<(), DataError> {
        if self.format != MANIFEST_FORMAT {
            return Err(DataError::Schema(format!("unsupported manifest format `{}`", self.format)));
        }
        if self.views.len() != NUM_VIEWS {
            return Err(DataError::Schema(format!("expected {NUM_VIEWS} views, found {}", self.views.len())));
        }
        validate_roster(&self.views)?;
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::Schema(format!("duplicate sample id `{}`", s.id)));
            }
            if s.views.len() != NUM_VIEWS {
                return Err(DataError::Schema(format!(
                    "sample `{}` references {} views, expected {NUM_VIEWS}",
                    s.id,
                    s.views.len()
                )));
            }
            for (spec, view) in self.views.iter().zip(&s.views) {
                if spec.view_id != view.view_id {
                    return Err(DataError::Schema(format!(
                        "sample `{}` lists view {} where the roster has {}",
                        s.id, view.view_id, spec.view_id
                    )));
                }
                let mut prev = None;
                for ann in &view.annotations {
                    if ann.frame_index >= s.num_frames || prev.is_some_and(|p| p >= ann.frame_index) {
                        return Err(DataError::Schema(format!(
                            "sample `{}` view {}: annotation indices must be strictly increasing and < {}",
                            s.id, view.view_id, s.num_frames
                        )));
                    }
                    prev = Some(ann.frame_index);
                    let classes: Vec<Chamber> = ann.masks.iter().map(|m| m.class).collect();
                    if classes != spec.class_set {
                        return Err(DataError::Schema(format!(
                            "sample `{}` view {} frame {}: masks {classes:?} do not match class set {:?}",
                            s.id, view.view_id, ann.frame_index, spec.class_set
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<(), DataError> {
        for s in &self.samples {
            for v in &s.views {
                let dir = self.root.join(&v.frame_dir);
                for t in 0..s.num_frames {
                    let f = dir.join(frame_file_name(t));
                    if !f.is_file() {
                        return Err(DataError::MissingFile(f));
                    }
                }
                for m in v.annotations.iter().flat_map(|a| &a.masks) {
                    let f = self.root.join(&m.path);
                    if !f.is_file() {
                        return Err(DataError::MissingFile(f));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest as pretty JSON and sets `root` to its directory.
    pub fn save(&mut self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
        }
        std::fs::write(path, text + "\n").map_err(|e| DataError::io(path, e))?;
        self.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(())
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Decodes every frame and mask of one record.
    pub fn load_sample(&self, record: &SampleRecord) -> Result<MultiViewVideoSample, DataError> {
        let mut views = Vec::with_capacity(record.views.len());
        for (spec, v) in self.views.iter().zip(&record.views) {
            let dir = self.root.join(&v.frame_dir);
            let frames =
                (0..record.num_frames).map(|t| read_frame(&dir.join(frame_file_name(t)))).collect::<Result<_, _>>()?;
            let annotations = v
                .annotations
                .iter()
                .map(|a| {
                    let masks =
                        a.masks.iter().map(|m| read_mask(&self.root.join(&m.path))).collect::<Result<_, _>>()?;
                    Ok(Annotation { frame_index: a.frame_index, masks })
                })
                .collect::<Result<_, DataError>>()?;
            views.push(ViewVideo { spec: spec.clone(), frames, annotations });
        }
        MultiViewVideoSample::new(record.id.clone(), views)
    }

    /// Loads every sample of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<MultiViewVideoSample>, DataError> {
        self.split(split).map(|r| self.load_sample(r)).collect()
    }
}
