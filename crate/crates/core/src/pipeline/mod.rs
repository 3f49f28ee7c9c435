//! Dataset handling, model selection, evaluation and the serialized
//! pipeline artifact.

pub mod artifact;
pub mod dataset;
pub mod grid;
pub mod metrics;

pub use artifact::{
    deserialize_pipeline, fit_pipeline, serialize_pipeline, ArtifactHeader, PipelineArtifact,
    FORMAT_VERSION, MAGIC,
};
pub use dataset::{stratified_folds, Dataset, LabeledExample};
pub use grid::{
    grid_search, ForestGrid, GaussianNbGrid, GridCandidate, GridSearchOutcome, GridSearchSpec,
    LeaderboardEntry, LinearSvmGrid, LogisticGrid, ModelGrid,
};
pub use metrics::{evaluate, ClassMetrics, EvalMetrics, Scoring};

use crate::features::FeatureError;
use crate::models::ModelError;
use crate::tokenize::TokenizeError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("test fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("class {label:?} has {count} examples, need at least {required}")]
    ClassTooSmall {
        label: String,
        count: usize,
        required: usize,
    },
    #[error("cv_folds must be at least 2, got {0}")]
    InvalidFolds(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("label {0:?} is unknown to the artifact")]
    LabelMismatch(String),
    #[error("unsupported artifact format version {0}")]
    VersionUnsupported(u32),
    #[error("artifact digest mismatch: header {expected}, payload {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
    #[error("every grid candidate failed")]
    AllCandidatesFailed,
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
