//! Vocabulary construction, bag-of-words counting and TF-IDF scaling.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("no tokens survive document-frequency filtering")]
    EmptyCorpus,
    #[error("invalid vectorizer config: {0}")]
    InvalidConfig(String),
    #[error("idf table has {got} entries, vocabulary has {expected}")]
    IdfMismatch { expected: usize, got: usize },
}

/// A document-frequency bound: an absolute document count, or a proportion
/// of the corpus size.
///
/// Serialized untagged, so `2` is a count and `0.5` a proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DocFrequency {
    Count(u64),
    Proportion(f64),
}

impl DocFrequency {
    fn validate(&self, name: &str) -> Result<(), FeatureError> {
        match *self {
            DocFrequency::Proportion(p) if !(0.0..=1.0).contains(&p) || p.is_nan() => Err(
                FeatureError::InvalidConfig(format!("{name} proportion {p} outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }

    /// Smallest df satisfying this bound used as a minimum.
    pub fn resolve_min(&self, corpus_size: usize) -> u64 {
        match *self {
            DocFrequency::Count(c) => c,
            DocFrequency::Proportion(p) => (p * corpus_size as f64).ceil() as u64,
        }
    }

    /// Largest df satisfying this bound used as a maximum.
    pub fn resolve_max(&self, corpus_size: usize) -> u64 {
        match *self {
            DocFrequency::Count(c) => c,
            DocFrequency::Proportion(p) => (p * corpus_size as f64).floor() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorizerConfig {
    pub min_df: DocFrequency,
    pub max_df: DocFrequency,
    pub use_tfidf: bool,
    #[serde(default)]
    pub clamp_negative_idf: bool,
    #[serde(default)]
    pub l2_normalize: bool,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        Self {
            min_df: DocFrequency::Count(1),
            max_df: DocFrequency::Proportion(1.0),
            use_tfidf: true,
            clamp_negative_idf: false,
            l2_normalize: false,
        }
    }
}

impl VectorizerConfig {
    pub fn counts() -> Self {
        Self {
            use_tfidf: false,
            ..Self::default()
        }
    }

    pub fn tfidf() -> Self {
        Self::default()
    }

    /// Checks the parts of the config that do not depend on the corpus.
    pub fn validate(&self) -> Result<(), FeatureError> {
        self.min_df.validate("min_df")?;
        self.max_df.validate("max_df")?;
        if let (DocFrequency::Count(lo), DocFrequency::Count(hi)) = (self.min_df, self.max_df) {
            if lo > hi {
                return Err(FeatureError::InvalidConfig(format!(
                    "min_df ({lo}) exceeds max_df ({hi})"
                )));
            }
        }
        if let (DocFrequency::Proportion(lo), DocFrequency::Proportion(hi)) =
            (self.min_df, self.max_df)
        {
            if lo > hi {
                return Err(FeatureError::InvalidConfig(format!(
                    "min_df ({lo}) exceeds max_df ({hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Token to dense index map with document frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    doc_freq: Vec<u64>,
    corpus_size: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    doc_freq: Vec<u64>,
    corpus_size: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_parts(r.tokens, r.doc_freq, r.corpus_size)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            doc_freq: v.doc_freq,
            corpus_size: v.corpus_size,
        }
    }
}

impl Vocabulary {
    pub fn from_parts(tokens: Vec<String>, doc_freq: Vec<u64>, corpus_size: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            doc_freq,
            corpus_size,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn doc_freq(&self, index: usize) -> u64 {
        self.doc_freq[index]
    }

    pub fn doc_freqs(&self) -> &[u64] {
        &self.doc_freq
    }
}

/// Builds the vocabulary of tokens whose document frequency lies within the
/// configured bounds. Indices follow first-seen corpus order.
pub fn build_vocabulary<D, T>(
    docs: &[D],
    config: &VectorizerConfig,
) -> Result<Vocabulary, FeatureError>
where
    D: AsRef<[T]>,
    T: AsRef<str>,
{
    config.validate()?;
    let n = docs.len();
    let mut order: Vec<&str> = Vec::new();
    let mut df: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        let mut seen: HashSet<&str> = HashSet::new();
        for tok in doc.as_ref() {
            let tok = tok.as_ref();
            if seen.insert(tok) {
                let entry = df.entry(tok).or_insert_with(|| {
                    order.push(tok);
                    0
                });
                *entry += 1;
            }
        }
    }
    let lo = config.min_df.resolve_min(n);
    let hi = config.max_df.resolve_max(n);
    let mut tokens = Vec::new();
    let mut freqs = Vec::new();
    for tok in order {
        let d = df[tok];
        if lo <= d && d <= hi {
            tokens.push(tok.to_owned());
            freqs.push(d);
        }
    }
    if tokens.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    Ok(Vocabulary::from_parts(tokens, freqs, n))
}

/// Inverse document frequencies, `ln(N / (1 + df))` per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdfTable(#[serde(with = "encoding::f64_le")] pub Vec<f64>);

impl IdfTable {
    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ln(N / (1 + df))`, optionally floored at zero.
pub fn idf_value(corpus_size: usize, doc_freq: u64, clamp_negative: bool) -> f64 {
    let v = (corpus_size as f64 / (1.0 + doc_freq as f64)).ln();
    if clamp_negative {
        v.max(0.0)
    } else {
        v
    }
}

pub fn compute_idf(vocab: &Vocabulary, clamp_negative: bool) -> IdfTable {
    IdfTable(
        vocab
            .doc_freq
            .iter()
            .map(|&d| idf_value(vocab.corpus_size, d, clamp_negative))
            .collect(),
    )
}

/// Sparse feature vector; entries are kept sorted by index with no zeros.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    entries: Vec<(usize, f64)>,
    dimension: usize,
}

impl FeatureVector {
    pub fn empty(dimension: usize) -> Self {
        Self {
            entries: Vec::new(),
            dimension,
        }
    }

    /// Builds a vector from arbitrary `(index, value)` pairs; duplicate
    /// indices are summed and zeros dropped.
    pub fn from_pairs(dimension: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut map: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in pairs {
            assert!(i < dimension, "index {i} out of dimension {dimension}");
            *map.entry(i).or_insert(0.0) += v;
        }
        Self {
            entries: map.into_iter().filter(|(_, v)| *v != 0.0).collect(),
            dimension,
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
            dimension: values.len(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |(i, _)| *i)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum()
    }
}

/// Counts in-vocabulary tokens, then applies TF-IDF and L2 scaling as
/// configured. Out-of-vocabulary tokens are ignored.
pub fn vectorize<T: AsRef<str>>(
    tokens: &[T],
    vocab: &Vocabulary,
    idf: Option<&IdfTable>,
    config: &VectorizerConfig,
) -> Result<FeatureVector, FeatureError> {
    let idf = match (config.use_tfidf, idf) {
        (true, Some(t)) if t.len() != vocab.len() => {
            return Err(FeatureError::IdfMismatch {
                expected: vocab.len(),
                got: t.len(),
            })
        }
        (true, Some(t)) => Some(t),
        (true, None) => {
            return Err(FeatureError::InvalidConfig(
                "use_tfidf is set but no idf table was supplied".into(),
            ))
        }
        (false, _) => None,
    };
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for tok in tokens {
        if let Some(i) = vocab.index_of(tok.as_ref()) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(i, c)| {
            let w = match idf {
                Some(t) => c as f64 * t.get(i),
                None => c as f64,
            };
            (i, w)
        })
        .filter(|(_, w)| *w != 0.0)
        .collect();
    if config.l2_normalize {
        let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut entries {
                *w /= norm;
            }
        }
    }
    Ok(FeatureVector {
        entries,
        dimension: vocab.len(),
    })
}
