//! Log classification: tokenization, bag-of-words features, classifiers,
//! model selection and the portable pipeline artifact.

pub mod encoding;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod synth;
pub mod tokenize;

pub use features::{FeatureVector, IdfTable, VectorizerConfig, Vocabulary};
pub use models::{Algorithm, LabelSet, ModelParams, ModelSpec, Prediction};
pub use pipeline::{
    deserialize_pipeline, serialize_pipeline, Dataset, EvalMetrics, GridSearchSpec, LabeledExample,
    PipelineArtifact, PipelineError,
};
pub use tokenize::{LogSnippet, TokenMode, TokenizerConfig};
