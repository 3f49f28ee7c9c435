//! The self-contained classification pipeline and its on-disk container.
//!
//! Container layout:
//!
//! ```text
//! TAXON-PIPELINE\n
//! {"format_version":1,"compression":"gzip",...,"payload_sha256":"..."}\n
//! <gzip-compressed JSON payload>
//! ```
//!
//! The digest covers the compressed payload bytes and is verified before
//! decompression. Parameter arrays inside the payload are stored as
//! base64 little-endian f64 blocks tagged `f64le/base64`.

use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::Dataset;
use super::metrics::EvalMetrics;
use super::PipelineError;
use crate::encoding::f64_le;
use crate::features::{
    build_vocabulary, compute_idf, vectorize, FeatureVector, IdfTable, VectorizerConfig, Vocabulary,
};
use crate::models::{predict, LabelSet, ModelParams, ModelSpec, Prediction, TrainingSet};
use crate::tokenize::{tokenize, TokenizerConfig};

pub const MAGIC: &[u8] = b"TAXON-PIPELINE\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineArtifact {
    pub format_version: u32,
    pub tokenizer: TokenizerConfig,
    pub vectorizer: VectorizerConfig,
    pub vocabulary: Vocabulary,
    pub idf: Option<IdfTable>,
    pub model: ModelParams,
    pub hyperparameters: ModelSpec,
    pub labels: LabelSet,
    pub metrics: Option<EvalMetrics>,
    pub created_at: DateTime<Utc>,
    /// sha256 of the compressed payload; known once serialized or loaded.
    #[serde(skip)]
    pub digest: Option<String>,
}

impl PipelineArtifact {
    pub fn featurize(&self, text: &str) -> Result<FeatureVector, PipelineError> {
        let tokens = tokenize(text, &self.tokenizer);
        Ok(vectorize(
            &tokens,
            &self.vocabulary,
            self.idf.as_ref(),
            &self.vectorizer,
        )?)
    }

    pub fn classify(&self, text: &str) -> Result<Prediction, PipelineError> {
        let x = self.featurize(text)?;
        Ok(predict(&self.model, &x, &self.labels)?)
    }
}

/// Fits one tokenizer, vectorizer and model configuration on `train`.
/// `metrics` is left empty for the caller to fill after evaluation.
pub fn fit_pipeline(
    train: &Dataset,
    tokenizer: &TokenizerConfig,
    vectorizer: &VectorizerConfig,
    spec: &ModelSpec,
) -> Result<PipelineArtifact, PipelineError> {
    tokenizer.validate()?;
    vectorizer.validate()?;
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let docs: Vec<Vec<String>> = train
        .texts()
        .iter()
        .map(|t| tokenize(t, tokenizer))
        .collect();
    fit_tokens(
        &docs,
        &train.class_ids(),
        train.label_set(),
        tokenizer,
        vectorizer,
        spec,
    )
}

/// Fit on pre-tokenized documents. Used directly by grid search so each
/// tokenizer configuration tokenizes the corpus once.
pub(crate) fn fit_tokens(
    docs: &[Vec<String>],
    labels: &[usize],
    label_set: &LabelSet,
    tokenizer: &TokenizerConfig,
    vectorizer: &VectorizerConfig,
    spec: &ModelSpec,
) -> Result<PipelineArtifact, PipelineError> {
    let (vocabulary, idf, features) = featurize_corpus(docs, vectorizer)?;
    let set = TrainingSet::new(&features, labels, label_set.len())?;
    let model = spec.fit(&set)?;
    Ok(PipelineArtifact {
        format_version: FORMAT_VERSION,
        tokenizer: tokenizer.clone(),
        vectorizer: vectorizer.clone(),
        vocabulary,
        idf,
        model,
        hyperparameters: spec.clone(),
        labels: label_set.clone(),
        metrics: None,
        created_at: Utc::now(),
        digest: None,
    })
}

pub(crate) fn featurize_corpus(
    docs: &[Vec<String>],
    vectorizer: &VectorizerConfig,
) -> Result<(Vocabulary, Option<IdfTable>, Vec<FeatureVector>), PipelineError> {
    let vocabulary = build_vocabulary(docs, vectorizer)?;
    let idf = vectorizer
        .use_tfidf
        .then(|| compute_idf(&vocabulary, vectorizer.clamp_negative_idf));
    let features = docs
        .iter()
        .map(|d| vectorize(d, &vocabulary, idf.as_ref(), vectorizer))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((vocabulary, idf, features))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u32,
    pub compression: String,
    pub payload: String,
    pub float_encoding: String,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

impl ArtifactHeader {
    /// Parses the header without touching the payload. Returns the header
    /// and the offset at which the payload starts.
    pub fn read(bytes: &[u8]) -> Result<(Self, usize), PipelineError> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| PipelineError::CorruptArtifact("missing magic line".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PipelineError::CorruptArtifact("unterminated header".into()))?;
        let header: ArtifactHeader = serde_json::from_slice(&rest[..nl])
            .map_err(|e| PipelineError::CorruptArtifact(format!("header: {e}")))?;
        Ok((header, MAGIC.len() + nl + 1))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn serialize_pipeline(artifact: &PipelineArtifact) -> Result<Vec<u8>, PipelineError> {
    let json = serde_json::to_vec(artifact).map_err(|e| PipelineError::Malformed(e.to_string()))?;
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&json)
        .and_then(|_| enc.flush())
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    let payload = enc
        .finish()
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    let header = ArtifactHeader {
        format_version: FORMAT_VERSION,
        compression: "gzip".into(),
        payload: "application/json".into(),
        float_encoding: f64_le::TAG.into(),
        payload_bytes: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
    };
    let mut out = MAGIC.to_vec();
    serde_json::to_writer(&mut out, &header)
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn deserialize_pipeline(bytes: &[u8]) -> Result<PipelineArtifact, PipelineError> {
    let (header, offset) = ArtifactHeader::read(bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(PipelineError::VersionUnsupported(header.format_version));
    }
    if header.compression != "gzip" || header.float_encoding != f64_le::TAG {
        return Err(PipelineError::CorruptArtifact(format!(
            "unsupported encoding {}/{}",
            header.compression, header.float_encoding
        )));
    }
    let payload = &bytes[offset..];
    let actual = sha256_hex(payload);
    if actual != header.payload_sha256 || payload.len() as u64 != header.payload_bytes {
        return Err(PipelineError::DigestMismatch {
            expected: header.payload_sha256,
            actual,
        });
    }
    let mut json = Vec::new();
    GzDecoder::new(payload)
        .read_to_end(&mut json)
        .map_err(|e| PipelineError::CorruptArtifact(format!("gzip: {e}")))?;
    let mut artifact: PipelineArtifact =
        serde_json::from_slice(&json).map_err(|e| PipelineError::CorruptArtifact(e.to_string()))?;
    if artifact.format_version != FORMAT_VERSION {
        return Err(PipelineError::VersionUnsupported(artifact.format_version));
    }
    artifact.digest = Some(header.payload_sha256);
    Ok(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LogisticParams, RandomForestParams};
    use crate::pipeline::LabeledExample;

    fn corpus() -> Dataset {
        let rows = [
            ("oom", "kernel out of memory killed process"),
            ("oom", "memory allocation failed oom killer"),
            ("oom", "oom score adj memory cgroup"),
            ("net", "connection refused by peer socket"),
            ("net", "network unreachable socket timeout"),
            ("net", "dns lookup timeout connection reset"),
        ];
        let ex = rows
            .iter()
            .enumerate()
            .map(|(i, (l, t))| LabeledExample::new(format!("T-{i}"), "core", *l, *t))
            .collect();
        Dataset::new(ex, None).unwrap()
    }

    fn probes() -> Vec<String> {
        (0..100)
            .map(|i| match i % 4 {
                0 => format!("memory oom {i}"),
                1 => format!("socket timeout peer {i}"),
                2 => "nothing known here".to_owned(),
                _ => format!("kernel memory connection {i} oom reset"),
            })
            .collect()
    }

    fn roundtrip(spec: ModelSpec) {
        let a = fit_pipeline(
            &corpus(),
            &TokenizerConfig::words(1),
            &VectorizerConfig::tfidf(),
            &spec,
        )
        .unwrap();
        let bytes = serialize_pipeline(&a).unwrap();
        let b = deserialize_pipeline(&bytes).unwrap();
        for p in probes() {
            let (x, y) = (a.classify(&p).unwrap(), b.classify(&p).unwrap());
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.class_scores), bits(&y.class_scores), "{p}");
            assert_eq!(x.label, y.label);
        }
        assert_eq!(serialize_pipeline(&b).unwrap(), bytes);
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        roundtrip(ModelSpec::GaussianNb {
            var_smoothing: 1e-9,
        });
        roundtrip(ModelSpec::Logistic(LogisticParams::default()));
        roundtrip(ModelSpec::RandomForest(RandomForestParams {
            n_trees: 5,
            ..Default::default()
        }));
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let a = fit_pipeline(
            &corpus(),
            &TokenizerConfig::words(1),
            &VectorizerConfig::counts(),
            &ModelSpec::GaussianNb {
                var_smoothing: 1e-9,
            },
        )
        .unwrap();
        let mut bytes = serialize_pipeline(&a).unwrap();
        let last = bytes.len() - 10;
        bytes[last] ^= 0x01;
        assert!(matches!(
            deserialize_pipeline(&bytes),
            Err(PipelineError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn header_is_self_describing() {
        let a = fit_pipeline(
            &corpus(),
            &TokenizerConfig::words(1),
            &VectorizerConfig::counts(),
            &ModelSpec::GaussianNb {
                var_smoothing: 1e-9,
            },
        )
        .unwrap();
        let bytes = serialize_pipeline(&a).unwrap();
        let (h, off) = ArtifactHeader::read(&bytes).unwrap();
        assert_eq!(h.format_version, 1);
        assert_eq!(h.float_encoding, "f64le/base64");
        assert_eq!(h.payload_bytes as usize, bytes.len() - off);
        let mut future = bytes.clone();
        let text = String::from_utf8_lossy(&future[..off])
            .replace("\"format_version\":1", "\"format_version\":7");
        future.splice(..off, text.into_bytes());
        assert!(matches!(
            deserialize_pipeline(&future),
            Err(PipelineError::VersionUnsupported(7))
        ));
    }
}
