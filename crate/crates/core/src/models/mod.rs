//! Classical classifiers over sparse feature vectors.
//!
//! Every model produces normalized per-class scores; [`Prediction`] picks the
//! arg-max with ties going to the lowest class id.

pub mod forest;
pub mod logistic;
pub mod naive_bayes;
pub mod svm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding;
use crate::features::FeatureVector;

pub use forest::{MaxFeatures, RandomForest, RandomForestParams};
pub use logistic::{LogisticModel, LogisticParams, Penalty};
pub use naive_bayes::GaussianNb;
pub use svm::{LinearSvm, LinearSvmParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("class {0} has no training examples")]
    MissingClass(usize),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("class id {id} outside label set of size {n_classes}")]
    ClassOutOfRange { id: usize, n_classes: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelSetError {
    #[error("label set is empty")]
    Empty,
    #[error("duplicate label {0:?}")]
    Duplicate(String),
}

/// Ordered, distinct category names; the position is the class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = LabelSetError;

    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.labels
    }
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, LabelSetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(LabelSetError::Empty);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(LabelSetError::Duplicate(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub class_id: usize,
    pub confidence: f64,
    pub class_scores: Vec<f64>,
}

impl Prediction {
    pub fn from_scores(scores: Vec<f64>, labels: &LabelSet) -> Self {
        let class_id = argmax(&scores);
        Self {
            label: labels.name(class_id).to_owned(),
            class_id,
            confidence: scores[class_id],
            class_scores: scores,
        }
    }
}

/// Index of the maximum; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Dense row-major matrix with portable serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    #[serde(with = "encoding::f64_le")]
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Borrowed, validated training data.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub features: &'a [FeatureVector],
    pub labels: &'a [usize],
    pub n_classes: usize,
    pub dimension: usize,
}

impl<'a> TrainingSet<'a> {
    /// Checks lengths, dimensions, class ids, and that every class is
    /// represented.
    pub fn new(
        features: &'a [FeatureVector],
        labels: &'a [usize],
        n_classes: usize,
    ) -> Result<Self, ModelError> {
        if features.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        if features.len() != labels.len() {
            return Err(ModelError::LengthMismatch {
                features: features.len(),
                labels: labels.len(),
            });
        }
        let dimension = features[0].dimension();
        if let Some(bad) = features.iter().find(|f| f.dimension() != dimension) {
            return Err(ModelError::DimensionMismatch {
                expected: dimension,
                got: bad.dimension(),
            });
        }
        let mut counts = vec![0usize; n_classes];
        for &y in labels {
            if y >= n_classes {
                return Err(ModelError::ClassOutOfRange { id: y, n_classes });
            }
            counts[y] += 1;
        }
        if let Some(missing) = counts.iter().position(|c| *c == 0) {
            return Err(ModelError::MissingClass(missing));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            dimension,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GaussianNb,
    Logistic,
    LinearSvm,
    RandomForest,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::GaussianNb,
        Algorithm::Logistic,
        Algorithm::LinearSvm,
        Algorithm::RandomForest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::GaussianNb => "gaussian_nb",
            Algorithm::Logistic => "logistic",
            Algorithm::LinearSvm => "linear_svm",
            Algorithm::RandomForest => "random_forest",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

/// One point in a hyperparameter grid: an algorithm plus its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ModelSpec {
    GaussianNb { var_smoothing: f64 },
    Logistic(LogisticParams),
    LinearSvm(LinearSvmParams),
    RandomForest(RandomForestParams),
}

impl ModelSpec {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            ModelSpec::GaussianNb { .. } => Algorithm::GaussianNb,
            ModelSpec::Logistic(_) => Algorithm::Logistic,
            ModelSpec::LinearSvm(_) => Algorithm::LinearSvm,
            ModelSpec::RandomForest(_) => Algorithm::RandomForest,
        }
    }

    pub fn fit(&self, set: &TrainingSet<'_>) -> Result<ModelParams, ModelError> {
        Ok(match self {
            ModelSpec::GaussianNb { var_smoothing } => {
                ModelParams::GaussianNb(GaussianNb::fit(set, *var_smoothing)?)
            }
            ModelSpec::Logistic(p) => ModelParams::Logistic(LogisticModel::fit(set, p)?.0),
            ModelSpec::LinearSvm(p) => ModelParams::LinearSvm(LinearSvm::fit(set, p)?),
            ModelSpec::RandomForest(p) => ModelParams::RandomForest(RandomForest::fit(set, p)?),
        })
    }

    /// Short human-readable description for leaderboards and logs.
    pub fn describe(&self) -> String {
        match self {
            ModelSpec::GaussianNb { var_smoothing } => {
                format!("gaussian_nb(eps={var_smoothing:e})")
            }
            ModelSpec::Logistic(p) => format!("logistic({:?}, lambda={})", p.penalty, p.strength),
            ModelSpec::LinearSvm(p) => format!("linear_svm(C={})", p.c),
            ModelSpec::RandomForest(p) => format!(
                "random_forest(trees={}, depth={})",
                p.n_trees,
                p.max_depth.map_or("none".to_owned(), |d| d.to_string())
            ),
        }
    }
}

/// Trained parameters of any supported model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ModelParams {
    GaussianNb(GaussianNb),
    Logistic(LogisticModel),
    LinearSvm(LinearSvm),
    RandomForest(RandomForest),
}

impl ModelParams {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            ModelParams::GaussianNb(_) => Algorithm::GaussianNb,
            ModelParams::Logistic(_) => Algorithm::Logistic,
            ModelParams::LinearSvm(_) => Algorithm::LinearSvm,
            ModelParams::RandomForest(_) => Algorithm::RandomForest,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            ModelParams::GaussianNb(m) => m.dimension(),
            ModelParams::Logistic(m) => m.dimension(),
            ModelParams::LinearSvm(m) => m.dimension(),
            ModelParams::RandomForest(m) => m.dimension(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelParams::GaussianNb(m) => m.n_classes(),
            ModelParams::Logistic(m) => m.n_classes(),
            ModelParams::LinearSvm(m) => m.n_classes(),
            ModelParams::RandomForest(m) => m.n_classes(),
        }
    }

    /// Normalized per-class scores for `x`.
    pub fn class_scores(&self, x: &FeatureVector) -> Result<Vec<f64>, ModelError> {
        if x.dimension() != self.dimension() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dimension(),
                got: x.dimension(),
            });
        }
        Ok(match self {
            ModelParams::GaussianNb(m) => m.scores(x),
            ModelParams::Logistic(m) => m.scores(x),
            ModelParams::LinearSvm(m) => m.scores(x),
            ModelParams::RandomForest(m) => m.scores(x),
        })
    }
}

pub fn predict(
    params: &ModelParams,
    x: &FeatureVector,
    labels: &LabelSet,
) -> Result<Prediction, ModelError> {
    Ok(Prediction::from_scores(params.class_scores(x)?, labels))
}
