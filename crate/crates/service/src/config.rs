//! Layered service configuration: built-in defaults, then a TOML file,
//! then command-line overrides, merged key by key.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taxon_core::features::DocFrequency;
use taxon_core::models::{MaxFeatures, Penalty};
use taxon_core::pipeline::{ForestGrid, GaussianNbGrid, LinearSvmGrid, LogisticGrid, ModelGrid};
use taxon_core::{Algorithm, GridSearchSpec, TokenMode, TokenizerConfig, VectorizerConfig};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}` expects {expected}, found {found}")]
    TypeMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("invalid configuration: {0}")]
    ConstraintViolation(String),
    #[error("cannot parse {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub mode: TokenMode,
    pub n_min: usize,
    pub n_max: usize,
    pub lowercase: bool,
    /// Newline-separated stop word list; empty for none.
    pub stop_words_file: String,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            mode: TokenMode::Word,
            n_min: 1,
            n_max: 1,
            lowercase: true,
            stop_words_file: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorizerSection {
    /// Integer document count or fraction in [0, 1].
    pub min_df: DocFrequency,
    pub max_df: DocFrequency,
    pub tfidf: bool,
    pub clamp_negative_idf: bool,
    pub l2_normalize: bool,
}

impl Default for VectorizerSection {
    fn default() -> Self {
        let v = VectorizerConfig::default();
        Self {
            min_df: v.min_df,
            max_df: v.max_df,
            tfidf: v.use_tfidf,
            clamp_negative_idf: v.clamp_negative_idf,
            l2_normalize: v.l2_normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub algorithms: Vec<Algorithm>,
    pub nb_var_smoothing: Vec<f64>,
    pub logistic_strength: Vec<f64>,
    pub logistic_penalty: Vec<Penalty>,
    pub svm_c: Vec<f64>,
    pub forest_trees: Vec<usize>,
    /// 0 means unlimited depth.
    pub forest_max_depth: Vec<usize>,
    pub max_iter: usize,
    pub cv_folds: usize,
    pub test_fraction: f64,
    pub parallel_jobs: usize,
    pub seed: u64,
    /// Pinned label set; empty derives labels from the data.
    pub labels: Vec<String>,
    /// Whether annotation may introduce labels outside the known set.
    pub allow_new_labels: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let lg = LogisticGrid::default();
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            nb_var_smoothing: GaussianNbGrid::default().var_smoothing,
            logistic_strength: lg.strength,
            logistic_penalty: lg.penalty,
            svm_c: LinearSvmGrid::default().c,
            forest_trees: ForestGrid::default().n_trees,
            forest_max_depth: vec![16, 0],
            max_iter: 500,
            cv_folds: 3,
            test_fraction: 0.2,
            parallel_jobs: 1,
            seed: 0,
            labels: Vec::new(),
            allow_new_labels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Seconds between scheduled retrains; 0 disables scheduling.
    pub retrain_interval_s: u64,
    pub auto_promote: bool,
    /// Classifier base URLs that receive promoted artifacts.
    pub promote_to: Vec<String>,
    /// Local directory or http(s) URI receiving exported artifacts.
    pub export_path: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            retrain_interval_s: 0,
            auto_promote: false,
            promote_to: Vec::new(),
            export_path: "models".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreBackend {
    File,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// Lines per window; 0 classifies each log whole.
    pub window_lines: usize,
    pub store_threshold: f64,
    pub store_backend: StoreBackend,
    /// Keep classified text in the store; digest-only when false.
    pub retain_input: bool,
    /// Artifact loaded at startup when the file exists; empty for none.
    pub model_path: String,
    pub fetch_max_bytes: u64,
    pub fetch_timeout_s: u64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            window_lines: 0,
            store_threshold: 0.8,
            store_backend: StoreBackend::File,
            retain_input: true,
            model_path: String::new(),
            fetch_max_bytes: 64 * 1024 * 1024,
            fetch_timeout_s: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    /// 0 picks a free port; the chosen port is written to the port file.
    pub train_port: u16,
    pub classify_port: u16,
    pub data_dir: String,
    pub drain_timeout_s: u64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            train_port: 8610,
            classify_port: 8620,
            data_dir: "data".into(),
            drain_timeout_s: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub tokenizer: TokenizerSection,
    pub vectorizer: VectorizerSection,
    pub training: TrainingSection,
    pub schedule: ScheduleSection,
    pub classify: ClassifySection,
    pub server: ServerSection,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Merges `layer` into `base`, rejecting keys and types `base` lacks.
/// Integers are accepted where a float is expected. Keys whose default
/// can legitimately hold either kind (`min_df`, `max_df`) are untyped.
fn merge(base: &mut Table, layer: Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in layer {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(slot) = base.get_mut(&k) else {
            return Err(ConfigError::UnknownKey(key));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(l)) => merge(b, l, &key)?,
            (slot @ Value::Float(_), Value::Integer(i)) => *slot = Value::Float(i as f64),
            (slot, v) if UNTYPED.contains(&key.as_str()) => *slot = v,
            (slot, v) if std::mem::discriminant(slot) == std::mem::discriminant(&v) => *slot = v,
            (slot, v) => {
                return Err(ConfigError::TypeMismatch {
                    key,
                    expected: type_name(slot).into(),
                    found: type_name(&v).into(),
                })
            }
        }
    }
    Ok(())
}

const UNTYPED: &[&str] = &["vectorizer.min_df", "vectorizer.max_df"];

/// Parses a `section.key=value` override. The value is read as a TOML
/// value, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::Parse {
        origin: "override".into(),
        message: format!("expected key=value, got {s:?}"),
    })?;
    let key = key.trim().to_owned();
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((key, value))
}

fn overrides_table(overrides: &[(String, Value)]) -> Result<Table, ConfigError> {
    let mut root = Table::new();
    for (key, value) in overrides {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts
            .pop()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        let mut t = &mut root;
        for p in parts {
            let entry = t
                .entry(p.to_owned())
                .or_insert_with(|| Value::Table(Table::new()));
            t = match entry {
                Value::Table(inner) => inner,
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            };
        }
        t.insert(last.to_owned(), value.clone());
    }
    Ok(root)
}

impl ServiceConfig {
    fn defaults_table() -> Table {
        match Value::try_from(ServiceConfig::default()).expect("defaults serialize") {
            Value::Table(t) => t,
            _ => unreachable!(),
        }
    }

    /// Resolves defaults < `file` < `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut table = Self::defaults_table();
        if let Some(text) = file {
            let layer: Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
                origin: "config file".into(),
                message: e.to_string(),
            })?;
            merge(&mut table, layer, "")?;
        }
        merge(&mut table, overrides_table(overrides)?, "")?;
        let cfg: ServiceConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::TypeMismatch {
                key: "<config>".into(),
                expected: "valid value".into(),
                found: e.message().to_owned(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    /// The effective configuration as TOML; loading it back yields an
    /// identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::ConstraintViolation(m));
        let t = &self.tokenizer;
        if t.n_min == 0 || t.n_min > t.n_max {
            return bad(format!(
                "tokenizer n range {}..={} is invalid",
                t.n_min, t.n_max
            ));
        }
        if let Err(e) = self.vectorizer_config().validate() {
            return bad(e.to_string());
        }
        let tr = &self.training;
        if tr.algorithms.is_empty() {
            return bad("training.algorithms is empty".into());
        }
        let grids: [(&str, bool); 5] = [
            ("nb_var_smoothing", tr.nb_var_smoothing.is_empty()),
            ("logistic_strength", tr.logistic_strength.is_empty()),
            ("logistic_penalty", tr.logistic_penalty.is_empty()),
            ("svm_c", tr.svm_c.is_empty()),
            (
                "forest_trees",
                tr.forest_trees.is_empty() || tr.forest_max_depth.is_empty(),
            ),
        ];
        for (name, empty) in grids {
            if empty {
                return bad(format!("training.{name} is empty"));
            }
        }
        if tr.cv_folds < 2 {
            return bad(format!(
                "training.cv_folds must be at least 2, got {}",
                tr.cv_folds
            ));
        }
        if !(tr.test_fraction > 0.0 && tr.test_fraction < 1.0) {
            return bad(format!(
                "training.test_fraction must be in (0, 1), got {}",
                tr.test_fraction
            ));
        }
        if tr.parallel_jobs == 0 {
            return bad("training.parallel_jobs must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for l in &tr.labels {
            if l.is_empty() || !seen.insert(l) {
                return bad(format!(
                    "training.labels has an empty or repeated entry {l:?}"
                ));
            }
        }
        let c = &self.classify;
        if !(0.0..=1.0).contains(&c.store_threshold) {
            return bad(format!(
                "classify.store_threshold must be in [0, 1], got {}",
                c.store_threshold
            ));
        }
        if c.fetch_max_bytes == 0 || c.fetch_timeout_s == 0 {
            return bad("classify fetch limits must be positive".into());
        }
        if self.schedule.export_path.is_empty() {
            return bad("schedule.export_path is empty".into());
        }
        Ok(())
    }

    pub fn stop_words(&self) -> Result<BTreeSet<String>, ConfigError> {
        let path = &self.tokenizer.stop_words_file;
        if path.is_empty() {
            return Ok(BTreeSet::new());
        }
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect())
    }

    pub fn tokenizer_config(&self) -> Result<TokenizerConfig, ConfigError> {
        let t = &self.tokenizer;
        Ok(TokenizerConfig {
            mode: t.mode,
            n_min: t.n_min,
            n_max: t.n_max,
            lowercase: t.lowercase,
            stop_words: self.stop_words()?,
        })
    }

    pub fn vectorizer_config(&self) -> VectorizerConfig {
        let v = &self.vectorizer;
        VectorizerConfig {
            min_df: v.min_df,
            max_df: v.max_df,
            use_tfidf: v.tfidf,
            clamp_negative_idf: v.clamp_negative_idf,
            l2_normalize: v.l2_normalize,
        }
    }

    pub fn grid_spec(&self) -> Result<GridSearchSpec, ConfigError> {
        let tr = &self.training;
        let mut models = ModelGrid::empty();
        for a in &tr.algorithms {
            match a {
                Algorithm::GaussianNb => {
                    models.gaussian_nb = Some(GaussianNbGrid {
                        var_smoothing: tr.nb_var_smoothing.clone(),
                    })
                }
                Algorithm::Logistic => {
                    models.logistic = Some(LogisticGrid {
                        strength: tr.logistic_strength.clone(),
                        penalty: tr.logistic_penalty.clone(),
                        max_iter: tr.max_iter,
                    })
                }
                Algorithm::LinearSvm => {
                    models.linear_svm = Some(LinearSvmGrid {
                        c: tr.svm_c.clone(),
                        max_iter: tr.max_iter,
                    })
                }
                Algorithm::RandomForest => {
                    models.random_forest = Some(ForestGrid {
                        n_trees: tr.forest_trees.clone(),
                        max_depth: tr
                            .forest_max_depth
                            .iter()
                            .map(|&d| (d > 0).then_some(d))
                            .collect(),
                        max_features: MaxFeatures::Sqrt,
                        bootstrap: true,
                    })
                }
            }
        }
        Ok(GridSearchSpec {
            tokenizers: vec![self.tokenizer_config()?],
            vectorizers: vec![self.vectorizer_config()],
            models,
            cv_folds: tr.cv_folds,
            scoring: Default::default(),
            parallel_jobs: tr.parallel_jobs,
            seed: tr.seed,
        })
    }

    /// Resolves a possibly relative path against the data directory.
    pub fn data_path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() || rel.contains("://") {
            p.to_path_buf()
        } else {
            Path::new(&self.server.data_dir).join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> (String, Value) {
        parse_override(s).unwrap()
    }

    #[test]
    fn precedence_is_per_key() {
        let file = "[classify]\nwindow_lines = 100\nstore_threshold = 0.5\n";
        let c = ServiceConfig::resolve(Some(file), &[ov("classify.window_lines=50")]).unwrap();
        assert_eq!(c.classify.window_lines, 50);
        assert_eq!(c.classify.store_threshold, 0.5);
        assert_eq!(c.classify.fetch_timeout_s, 30);
        assert_eq!(
            ServiceConfig::resolve(None, &[])
                .unwrap()
                .classify
                .window_lines,
            0
        );
    }

    #[test]
    fn misspelled_key_is_named() {
        let err =
            ServiceConfig::resolve(Some("[classify]\nwindwo_lines = 100\n"), &[]).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("classify.windwo_lines".into()));
        let err = ServiceConfig::resolve(None, &[ov("nope.x=1")]).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("nope".into()));
    }

    #[test]
    fn type_mismatch_and_constraints() {
        let err =
            ServiceConfig::resolve(Some("[classify]\nwindow_lines = \"many\"\n"), &[]).unwrap_err();
        assert!(
            matches!(err, ConfigError::TypeMismatch { ref key, .. } if key == "classify.window_lines")
        );
        let err = ServiceConfig::resolve(Some("[vectorizer]\nmin_df = 5\nmax_df = 2\n"), &[])
            .unwrap_err();
        assert!(
            matches!(err, ConfigError::ConstraintViolation(_)),
            "{err:?}"
        );
        let c =
            ServiceConfig::resolve(Some("[vectorizer]\nmin_df = 2\nmax_df = 0.9\n"), &[]).unwrap();
        assert_eq!(c.vectorizer.min_df, DocFrequency::Count(2));
        assert_eq!(c.vectorizer.max_df, DocFrequency::Proportion(0.9));
    }

    #[test]
    fn printed_config_reloads_identically() {
        let c = ServiceConfig::resolve(
            Some("[training]\nalgorithms = [\"logistic\"]\nlabels = [\"oom\", \"network\"]\n"),
            &[
                ov("server.train_port=0"),
                ov("classify.store_threshold=0.9"),
            ],
        )
        .unwrap();
        let again = ServiceConfig::resolve(Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn grid_follows_allow_list() {
        let c =
            ServiceConfig::resolve(None, &[ov("training.algorithms=[\"linear_svm\"]")]).unwrap();
        let g = c.grid_spec().unwrap();
        assert_eq!(g.candidates().len(), 3);
        let c = ServiceConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.grid_spec().unwrap().candidates().len(), 15);
    }
}
