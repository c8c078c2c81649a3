//! Dataset schema, manifest ingestion and clip sampling.

mod io;
mod manifest;
mod sample;
mod types;

use std::path::PathBuf;

pub use io::{read_frame, read_mask, write_frame, write_mask};
pub use manifest::{
    frame_file_name, load_manifest, mask_file_name, AnnotationRecord, DatasetManifest, MaskRecord, Resolution,
    SampleRecord, Split, ViewRecord, MANIFEST_FORMAT,
};
pub use sample::{MultiViewVideoSample, ViewVideo};
pub use types::{validate_roster, Annotation, BinaryMask, Chamber, Frame, ViewId, ViewSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}
