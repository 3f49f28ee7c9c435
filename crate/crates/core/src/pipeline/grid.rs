//! Exhaustive grid search with stratified k-fold cross-validation.

use serde::{Deserialize, Serialize};

use super::artifact::{featurize_corpus, fit_tokens, PipelineArtifact};
use super::dataset::{stratified_folds, Dataset};
use super::metrics::{EvalMetrics, Scoring};
use super::PipelineError;
use crate::features::{FeatureVector, VectorizerConfig};
use crate::models::{
    Algorithm, LinearSvmParams, LogisticParams, MaxFeatures, ModelSpec, Penalty,
    RandomForestParams, TrainingSet,
};
use crate::tokenize::{tokenize, TokenizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianNbGrid {
    pub var_smoothing: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticGrid {
    pub strength: Vec<f64>,
    pub penalty: Vec<Penalty>,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSvmGrid {
    pub c: Vec<f64>,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestGrid {
    pub n_trees: Vec<usize>,
    /// `None` entries mean unlimited depth.
    pub max_depth: Vec<Option<usize>>,
    #[serde(default)]
    pub max_features: MaxFeatures,
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

fn default_iter() -> usize {
    500
}

fn default_true() -> bool {
    true
}

impl Default for GaussianNbGrid {
    fn default() -> Self {
        Self {
            var_smoothing: vec![1e-9, 1e-6],
        }
    }
}

impl Default for LogisticGrid {
    fn default() -> Self {
        Self {
            strength: vec![0.001, 0.01, 0.1],
            penalty: vec![Penalty::L1, Penalty::L2],
            max_iter: default_iter(),
        }
    }
}

impl Default for LinearSvmGrid {
    fn default() -> Self {
        Self {
            c: vec![0.1, 1.0, 10.0],
            max_iter: default_iter(),
        }
    }
}

impl Default for ForestGrid {
    fn default() -> Self {
        Self {
            n_trees: vec![50, 100],
            max_depth: vec![Some(16), None],
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
        }
    }
}

/// Per-algorithm grids. An absent entry excludes that algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian_nb: Option<GaussianNbGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logistic: Option<LogisticGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_svm: Option<LinearSvmGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_forest: Option<ForestGrid>,
}

impl Default for ModelGrid {
    fn default() -> Self {
        Self::with_defaults(&Algorithm::ALL)
    }
}

impl ModelGrid {
    pub fn empty() -> Self {
        Self {
            gaussian_nb: None,
            logistic: None,
            linear_svm: None,
            random_forest: None,
        }
    }

    /// Default grids for the listed algorithms only.
    pub fn with_defaults(algorithms: &[Algorithm]) -> Self {
        let has = |a| algorithms.contains(&a);
        Self {
            gaussian_nb: has(Algorithm::GaussianNb).then(GaussianNbGrid::default),
            logistic: has(Algorithm::Logistic).then(LogisticGrid::default),
            linear_svm: has(Algorithm::LinearSvm).then(LinearSvmGrid::default),
            random_forest: has(Algorithm::RandomForest).then(ForestGrid::default),
        }
    }

    /// Cartesian product of every grid, in algorithm order then the
    /// declared order of each value list.
    pub fn expand(&self, seed: u64) -> Vec<ModelSpec> {
        let mut out = Vec::new();
        if let Some(g) = &self.gaussian_nb {
            out.extend(
                g.var_smoothing
                    .iter()
                    .map(|&v| ModelSpec::GaussianNb { var_smoothing: v }),
            );
        }
        if let Some(g) = &self.logistic {
            for &strength in &g.strength {
                for &penalty in &g.penalty {
                    out.push(ModelSpec::Logistic(LogisticParams {
                        penalty,
                        strength,
                        max_iter: g.max_iter,
                        seed,
                        ..Default::default()
                    }));
                }
            }
        }
        if let Some(g) = &self.linear_svm {
            out.extend(g.c.iter().map(|&c| {
                ModelSpec::LinearSvm(LinearSvmParams {
                    c,
                    max_iter: g.max_iter,
                    seed,
                    ..Default::default()
                })
            }));
        }
        if let Some(g) = &self.random_forest {
            for &n_trees in &g.n_trees {
                for &max_depth in &g.max_depth {
                    out.push(ModelSpec::RandomForest(RandomForestParams {
                        n_trees,
                        max_depth,
                        max_features: g.max_features,
                        bootstrap: g.bootstrap,
                        seed,
                        ..Default::default()
                    }));
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let bad = |name: &str| {
            Err(PipelineError::InvalidGrid(format!(
                "{name} grid has an empty value list"
            )))
        };
        if let Some(g) = &self.gaussian_nb {
            if g.var_smoothing.is_empty() {
                return bad("gaussian_nb");
            }
        }
        if let Some(g) = &self.logistic {
            if g.strength.is_empty() || g.penalty.is_empty() {
                return bad("logistic");
            }
        }
        if let Some(g) = &self.linear_svm {
            if g.c.is_empty() {
                return bad("linear_svm");
            }
        }
        if let Some(g) = &self.random_forest {
            if g.n_trees.is_empty() || g.max_depth.is_empty() {
                return bad("random_forest");
            }
        }
        if self == &Self::empty() {
            return Err(PipelineError::InvalidGrid("no algorithm selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSearchSpec {
    #[serde(default = "default_tokenizers")]
    pub tokenizers: Vec<TokenizerConfig>,
    #[serde(default = "default_vectorizers")]
    pub vectorizers: Vec<VectorizerConfig>,
    #[serde(default)]
    pub models: ModelGrid,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub scoring: Scoring,
    #[serde(default = "default_jobs")]
    pub parallel_jobs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_tokenizers() -> Vec<TokenizerConfig> {
    vec![TokenizerConfig::words(1)]
}

fn default_vectorizers() -> Vec<VectorizerConfig> {
    vec![VectorizerConfig::tfidf()]
}

fn default_folds() -> usize {
    3
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        Self {
            tokenizers: default_tokenizers(),
            vectorizers: default_vectorizers(),
            models: ModelGrid::default(),
            cv_folds: default_folds(),
            scoring: Scoring::MacroF1,
            parallel_jobs: default_jobs(),
            seed: 0,
        }
    }
}

impl GridSearchSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.tokenizers.is_empty() || self.vectorizers.is_empty() {
            return Err(PipelineError::InvalidGrid(
                "tokenizer and vectorizer lists must be non-empty".into(),
            ));
        }
        for t in &self.tokenizers {
            t.validate()?;
        }
        for v in &self.vectorizers {
            v.validate()?;
        }
        if self.cv_folds < 2 {
            return Err(PipelineError::InvalidFolds(self.cv_folds));
        }
        if self.parallel_jobs == 0 {
            return Err(PipelineError::InvalidGrid(
                "parallel_jobs must be at least 1".into(),
            ));
        }
        self.models.validate()
    }

    /// Every combination in enumeration order: tokenizer, then vectorizer,
    /// then model grid.
    pub fn candidates(&self) -> Vec<GridCandidate> {
        let models = self.models.expand(self.seed);
        let mut out = Vec::new();
        for (ti, t) in self.tokenizers.iter().enumerate() {
            for (vi, v) in self.vectorizers.iter().enumerate() {
                for m in &models {
                    out.push(GridCandidate {
                        tokenizer_index: ti,
                        vectorizer_index: vi,
                        tokenizer: t.clone(),
                        vectorizer: v.clone(),
                        model: m.clone(),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    #[serde(skip)]
    tokenizer_index: usize,
    #[serde(skip)]
    vectorizer_index: usize,
    pub tokenizer: TokenizerConfig,
    pub vectorizer: VectorizerConfig,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub index: usize,
    pub description: String,
    pub candidate: GridCandidate,
    /// Mean CV score; `-inf` (serialized as `null`) when the candidate failed.
    #[serde(with = "score_or_null")]
    pub mean_score: f64,
    pub fold_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

mod score_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub best: PipelineArtifact,
    pub best_index: usize,
    pub leaderboard: Vec<LeaderboardEntry>,
}

impl GridSearchOutcome {
    pub fn best_score(&self) -> f64 {
        self.leaderboard[self.best_index].mean_score
    }

    pub fn leaderboard_json(&self) -> String {
        serde_json::to_string_pretty(&self.leaderboard).expect("leaderboard serializes")
    }
}

/// Features of one fold for one tokenizer/vectorizer pair. The vocabulary
/// is fit on the training part only.
struct FoldData {
    train_x: Vec<FeatureVector>,
    train_y: Vec<usize>,
    val_x: Vec<FeatureVector>,
    val_y: Vec<usize>,
}

pub fn grid_search(
    train: &Dataset,
    spec: &GridSearchSpec,
) -> Result<GridSearchOutcome, PipelineError> {
    spec.validate()?;
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let labels = train.class_ids();
    let label_set = train.label_set();
    let k = label_set.len();
    let folds = stratified_folds(&labels, k, spec.cv_folds, spec.seed, label_set)?;
    let mut in_fold = vec![0usize; labels.len()];
    for (f, idx) in folds.iter().enumerate() {
        for &i in idx {
            in_fold[i] = f;
        }
    }

    let token_docs: Vec<Vec<Vec<String>>> = spec
        .tokenizers
        .iter()
        .map(|t| train.texts().iter().map(|d| tokenize(d, t)).collect())
        .collect();

    // fold_data[tokenizer][vectorizer][fold]
    let mut fold_data: Vec<Vec<Vec<Result<FoldData, String>>>> = Vec::new();
    for docs in &token_docs {
        let mut per_vec = Vec::new();
        for v in &spec.vectorizers {
            per_vec.push(
                (0..spec.cv_folds)
                    .map(|f| build_fold(docs, &labels, &in_fold, f, v).map_err(|e| e.to_string()))
                    .collect(),
            );
        }
        fold_data.push(per_vec);
    }

    let candidates = spec.candidates();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallel_jobs)
        .build()
        .map_err(|e| PipelineError::InvalidGrid(e.to_string()))?;
    let evaluated: Vec<(Vec<f64>, Option<String>)> = pool.install(|| {
        use rayon::prelude::*;
        candidates
            .par_iter()
            .map(|c| {
                let data = &fold_data[c.tokenizer_index][c.vectorizer_index];
                score_candidate(c, data, label_set, spec.scoring)
            })
            .collect()
    });

    let mut leaderboard = Vec::with_capacity(candidates.len());
    for (index, (candidate, (fold_scores, error))) in
        candidates.into_iter().zip(evaluated).enumerate()
    {
        let mean_score = if error.is_some() {
            f64::NEG_INFINITY
        } else {
            fold_scores.iter().sum::<f64>() / fold_scores.len() as f64
        };
        if let Some(e) = &error {
            tracing::warn!(index, model = %candidate.model.describe(), error = %e, "grid candidate failed");
        }
        leaderboard.push(LeaderboardEntry {
            index,
            description: candidate.model.describe(),
            candidate,
            mean_score,
            fold_scores,
            error,
        });
    }

    let mut best_index = None;
    for e in &leaderboard {
        if e.mean_score.is_finite()
            && best_index.is_none_or(|b: usize| e.mean_score > leaderboard[b].mean_score)
        {
            best_index = Some(e.index);
        }
    }
    let best_index = best_index.ok_or(PipelineError::AllCandidatesFailed)?;
    let winner = &leaderboard[best_index].candidate;
    let best = fit_tokens(
        &token_docs[winner.tokenizer_index],
        &labels,
        label_set,
        &winner.tokenizer,
        &winner.vectorizer,
        &winner.model,
    )?;
    Ok(GridSearchOutcome {
        best,
        best_index,
        leaderboard,
    })
}

fn build_fold(
    docs: &[Vec<String>],
    labels: &[usize],
    in_fold: &[usize],
    fold: usize,
    vectorizer: &VectorizerConfig,
) -> Result<FoldData, PipelineError> {
    let mut train_docs = Vec::new();
    let mut train_y = Vec::new();
    let mut val_docs = Vec::new();
    let mut val_y = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if in_fold[i] == fold {
            val_docs.push(d.clone());
            val_y.push(labels[i]);
        } else {
            train_docs.push(d.clone());
            train_y.push(labels[i]);
        }
    }
    let (vocab, idf, train_x) = featurize_corpus(&train_docs, vectorizer)?;
    let val_x = val_docs
        .iter()
        .map(|d| crate::features::vectorize(d, &vocab, idf.as_ref(), vectorizer))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FoldData {
        train_x,
        train_y,
        val_x,
        val_y,
    })
}

fn score_candidate(
    c: &GridCandidate,
    folds: &[Result<FoldData, String>],
    label_set: &crate::models::LabelSet,
    scoring: Scoring,
) -> (Vec<f64>, Option<String>) {
    let mut scores = Vec::with_capacity(folds.len());
    for fold in folds {
        let fold = match fold {
            Ok(f) => f,
            Err(e) => return (scores, Some(e.clone())),
        };
        let result = TrainingSet::new(&fold.train_x, &fold.train_y, label_set.len())
            .and_then(|set| c.model.fit(&set))
            .and_then(|model| {
                fold.val_x
                    .iter()
                    .map(|x| model.class_scores(x).map(|s| crate::models::argmax(&s)))
                    .collect::<Result<Vec<_>, _>>()
            });
        match result {
            Ok(pred) => {
                let m = EvalMetrics::from_predictions(&fold.val_y, &pred, label_set);
                scores.push(scoring.score(&m));
            }
            Err(e) => return (scores, Some(e.to_string())),
        }
    }
    (scores, None)
}
