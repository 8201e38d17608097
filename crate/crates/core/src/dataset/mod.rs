//! Dataset manifests, human annotations, consensus labels and
//! inter-annotator agreement.

mod agreement;
mod annotation;
mod manifest;
mod store;

pub use agreement::{count_table, fleiss_kappa, CountRow};
pub use annotation::{
    consensus, consensus_of_scores, Annotation, AnnotationEvent, ConsensusLabel, ConsensusMethod,
};
pub use manifest::{load_manifest, parse_json, save_manifest, DatasetManifest, ManifestItem, SCHEMA_VERSION};
pub use store::{manifest_agreement, sidecar_path, AgreementSummary, AnnotateOutcome, AnnotationInput, AnnotationStore};

pub(crate) use manifest::write_atomic;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error at {pointer:?}: {message}")]
    Schema { pointer: String, message: String },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("consensus needs at least one annotation")]
    NoAnnotations,
    #[error("agreement: {0}")]
    Agreement(String),
    #[error("write conflict on {item_id}: base revision {expected}, current {actual}")]
    Conflict { item_id: String, expected: u64, actual: u64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
