//! The classification service: artifact hot-swap, windowed classification,
//! thresholded result storage, re-classification and serving metrics.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use taxon_core::{deserialize_pipeline, PipelineArtifact, PipelineError};

use crate::config::{ServiceConfig, StoreBackend};
use crate::fetch::{fetch_text, FetchLimits};
use crate::http::{
    parse_json, sha256_hex, write_atomic, ApiError, ApiResult, API_PREFIX, BODY_LIMIT,
};
use crate::results::{
    ClassificationRecord, FileResultStore, MemoryResultStore, ResultQuery, ResultStore, WindowSpan,
};

pub struct ActiveModel {
    pub artifact: PipelineArtifact,
    pub digest: String,
    pub loaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleItem {
    pub name: String,
    #[serde(default)]
    pub log: Option<String>,
    #[serde(default)]
    pub uri: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    #[serde(default)]
    pub log: Option<String>,
    #[serde(default)]
    pub uri: Option<String>,
    #[serde(default)]
    pub bundle: Option<Vec<BundleItem>>,
    #[serde(default)]
    pub window_lines: Option<usize>,
    #[serde(default)]
    pub store_threshold_override: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WindowResult {
    pub record_id: String,
    pub window: WindowSpan,
    pub label: String,
    pub confidence: f64,
    pub class_scores: Vec<f64>,
    pub model_digest: String,
    pub stored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub label: String,
    pub confidence: f64,
    pub window: WindowSpan,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemResult {
    pub name: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines: Option<usize>,
    #[serde(default)]
    pub records: Vec<WindowResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifyResponse {
    pub model_digest: String,
    pub items: Vec<ItemResult>,
    pub stored: usize,
}

/// Splits `text` into consecutive windows of `window_lines` lines (the
/// whole text when 0). Line terminators stay with their line. An empty
/// text yields a single empty window.
pub fn windows(text: &str, window_lines: usize) -> Vec<(WindowSpan, &str)> {
    let mut bounds = vec![0usize];
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' && i + 1 < text.len() {
            bounds.push(i + 1);
        }
    }
    let n_lines = if text.is_empty() { 0 } else { bounds.len() };
    if n_lines == 0 {
        return vec![(
            WindowSpan {
                start_line: 0,
                end_line: 0,
            },
            "",
        )];
    }
    bounds.push(text.len());
    let w = if window_lines == 0 {
        n_lines
    } else {
        window_lines
    };
    let mut out = Vec::with_capacity(n_lines.div_ceil(w));
    let mut start = 0;
    while start < n_lines {
        let end = (start + w).min(n_lines);
        out.push((
            WindowSpan {
                start_line: start,
                end_line: end,
            },
            &text[bounds[start]..bounds[end]],
        ));
        start = end;
    }
    out
}

const HISTOGRAM_BINS: usize = 10;
const LATENCY_SAMPLES: usize = 10_000;

#[derive(Default)]
struct MetricsState {
    requests: u64,
    failed_requests: u64,
    records: u64,
    stored: u64,
    per_label: BTreeMap<String, u64>,
    histogram: [u64; HISTOGRAM_BINS],
    latencies: VecDeque<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatencyQuantiles {
    pub p50_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ServingMetrics {
    pub requests: u64,
    pub failed_requests: u64,
    pub records: u64,
    pub stored_records: u64,
    pub per_label: BTreeMap<String, u64>,
    /// Counts of record confidences in ten equal-width bins over [0, 1].
    pub confidence_histogram: Vec<u64>,
    pub latency: Option<LatencyQuantiles>,
    pub model_digest: Option<String>,
    pub model_loaded_at: Option<DateTime<Utc>>,
    pub store_backend: String,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub struct ClassifyService {
    config: ServiceConfig,
    model: RwLock<Option<Arc<ActiveModel>>>,
    store: Arc<dyn ResultStore>,
    metrics: Mutex<MetricsState>,
    started: Instant,
}

impl ClassifyService {
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, String> {
        let store: Arc<dyn ResultStore> = match config.classify.store_backend {
            StoreBackend::Memory => Arc::new(MemoryResultStore::new()),
            StoreBackend::File => Arc::new(
                FileResultStore::open(config.data_path("results.jsonl"))
                    .map_err(|e| e.to_string())?,
            ),
        };
        Self::with_store(config, store)
    }

    pub fn with_store(
        config: ServiceConfig,
        store: Arc<dyn ResultStore>,
    ) -> Result<Arc<Self>, String> {
        let svc = Arc::new(Self {
            config,
            model: RwLock::new(None),
            store,
            metrics: Mutex::new(MetricsState::default()),
            started: Instant::now(),
        });
        let candidates = [
            svc.active_model_path(),
            PathBuf::from(&svc.config.classify.model_path),
        ];
        for p in candidates {
            if !p.as_os_str().is_empty() && p.is_file() {
                let bytes = std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                let digest = svc
                    .load_model(&bytes)
                    .map_err(|e| format!("{}: {e}", p.display()))?;
                tracing::info!(path = %p.display(), %digest, "loaded model at startup");
                break;
            }
        }
        Ok(svc)
    }

    fn active_model_path(&self) -> PathBuf {
        self.config.data_path("active.taxon")
    }

    pub fn store(&self) -> &Arc<dyn ResultStore> {
        &self.store
    }

    pub fn active(&self) -> Option<Arc<ActiveModel>> {
        self.model.read().unwrap().clone()
    }

    /// Verifies and activates an artifact. On error the current model
    /// keeps serving.
    pub fn load_model(&self, bytes: &[u8]) -> Result<String, PipelineError> {
        let artifact = deserialize_pipeline(bytes)?;
        let digest = artifact.digest.clone().expect("digest set on load");
        let model = Arc::new(ActiveModel {
            artifact,
            digest: digest.clone(),
            loaded_at: Utc::now(),
        });
        if let Err(e) = write_atomic(&self.active_model_path(), bytes) {
            tracing::warn!(error = %e, "could not persist active model");
        }
        *self.model.write().unwrap() = Some(model);
        Ok(digest)
    }

    fn limits(&self) -> FetchLimits {
        FetchLimits {
            max_bytes: self.config.classify.fetch_max_bytes,
            timeout: Duration::from_secs(self.config.classify.fetch_timeout_s),
        }
    }

    /// Classifies one input against `model`. Every window yields a record;
    /// the caller decides which are persisted.
    pub fn classify_input(
        &self,
        model: &ActiveModel,
        name: &str,
        source: &str,
        text: &str,
        window_lines: usize,
        threshold: f64,
    ) -> Result<(ItemResult, Vec<ClassificationRecord>), PipelineError> {
        let input_digest = sha256_hex(text.as_bytes());
        let now = Utc::now();
        let mut results = Vec::new();
        let mut records = Vec::new();
        let mut lines = 0;
        for (span, chunk) in windows(text, window_lines) {
            lines = span.end_line;
            let p = model.artifact.classify(chunk)?;
            let record_id = uuid::Uuid::new_v4().to_string();
            let stored = p.confidence >= threshold;
            let record = ClassificationRecord {
                record_id: record_id.clone(),
                timestamp: now,
                input_digest: input_digest.clone(),
                source: source.to_owned(),
                window: span,
                label: p.label.clone(),
                confidence: p.confidence,
                class_scores: p.class_scores.clone(),
                model_digest: model.digest.clone(),
                input: self.config.classify.retain_input.then(|| chunk.to_owned()),
                reclassified_from: None,
            };
            results.push(WindowResult {
                record_id,
                window: span,
                label: p.label,
                confidence: p.confidence,
                class_scores: p.class_scores,
                model_digest: model.digest.clone(),
                stored,
            });
            records.push((stored, record));
        }
        let best = argmax_confidence(&results);
        let aggregate = Aggregate {
            label: results[best].label.clone(),
            confidence: results[best].confidence,
            window: results[best].window,
        };
        let item = ItemResult {
            name: name.to_owned(),
            source: source.to_owned(),
            input_digest: Some(input_digest),
            lines: Some(lines),
            records: results,
            aggregate: Some(aggregate),
            error: None,
        };
        let to_store = records
            .into_iter()
            .filter(|(s, _)| *s)
            .map(|(_, r)| r)
            .collect();
        Ok((item, to_store))
    }

    fn record_metrics(&self, items: &[ItemResult], stored: usize, latency: Duration, failed: bool) {
        let mut m = self.metrics.lock().unwrap();
        m.requests += 1;
        if failed {
            m.failed_requests += 1;
            return;
        }
        for r in items.iter().flat_map(|i| &i.records) {
            m.records += 1;
            *m.per_label.entry(r.label.clone()).or_insert(0) += 1;
            let bin = ((r.confidence * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            m.histogram[bin] += 1;
        }
        m.stored += stored as u64;
        if m.latencies.len() == LATENCY_SAMPLES {
            m.latencies.pop_front();
        }
        m.latencies.push_back(latency.as_secs_f64());
    }

    pub fn serving_metrics(&self) -> ServingMetrics {
        let m = self.metrics.lock().unwrap();
        let latency = (!m.latencies.is_empty()).then(|| {
            let mut v: Vec<f64> = m.latencies.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            LatencyQuantiles {
                p50_s: quantile(&v, 0.50),
                p95_s: quantile(&v, 0.95),
                p99_s: quantile(&v, 0.99),
            }
        });
        let active = self.active();
        ServingMetrics {
            requests: m.requests,
            failed_requests: m.failed_requests,
            records: m.records,
            stored_records: m.stored,
            per_label: m.per_label.clone(),
            confidence_histogram: m.histogram.to_vec(),
            latency,
            model_digest: active.as_ref().map(|a| a.digest.clone()),
            model_loaded_at: active.as_ref().map(|a| a.loaded_at),
            store_backend: self.store.backend().to_owned(),
        }
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let api = Router::new()
            .route("/classify", post(classify_handler))
            .route("/results", get(results_handler))
            .route("/results/export", get(export_handler))
            .route("/results/import", post(import_handler))
            .route("/reclassify", post(reclassify_handler))
            .route("/model", post(load_model_handler).get(model_info_handler))
            .route("/metrics", get(metrics_handler))
            .route("/health", get(health_handler));
        Router::new()
            .nest(API_PREFIX, api)
            .layer(DefaultBodyLimit::max(BODY_LIMIT))
            .with_state(self.clone())
    }

    pub fn flush(&self) {
        if let Err(e) = self.store.flush() {
            tracing::error!(error = %e, "flushing result store failed");
        }
    }
}

fn argmax_confidence(results: &[WindowResult]) -> usize {
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.confidence > results[best].confidence {
            best = i;
        }
    }
    best
}

type Svc = State<Arc<ClassifyService>>;

fn pipeline_error(e: PipelineError) -> ApiError {
    let msg = e.to_string();
    match e {
        PipelineError::DigestMismatch { .. } => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "DigestMismatch", msg)
        }
        PipelineError::VersionUnsupported(_) => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "VersionUnsupported", msg)
        }
        PipelineError::CorruptArtifact(_) => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "CorruptArtifact", msg)
        }
        other => ApiError::internal(other.to_string()),
    }
}

fn no_model() -> ApiError {
    ApiError::new(
        StatusCode::SERVICE_UNAVAILABLE,
        "NoModelLoaded",
        "no model is loaded",
    )
}

enum Input {
    Text {
        name: String,
        source: String,
        text: String,
    },
    Failed {
        name: String,
        source: String,
        message: String,
    },
}

async fn classify_handler(State(svc): Svc, body: Bytes) -> ApiResult<Json<ClassifyResponse>> {
    let started = Instant::now();
    let result = classify_inner(&svc, &body).await;
    match &result {
        Ok(r) => svc.record_metrics(&r.items, r.stored, started.elapsed(), false),
        Err(_) => svc.record_metrics(&[], 0, started.elapsed(), true),
    }
    result.map(Json)
}

async fn classify_inner(svc: &Arc<ClassifyService>, body: &[u8]) -> ApiResult<ClassifyResponse> {
    let req: ClassifyRequest = parse_json(body)?;
    let variants = req.log.is_some() as u8 + req.uri.is_some() as u8 + req.bundle.is_some() as u8;
    if variants != 1 {
        return Err(ApiError::bad_request(
            "InvalidRequest",
            "exactly one of log, uri or bundle is required",
        ));
    }
    if req.window_lines == Some(0) {
        return Err(ApiError::bad_request(
            "InvalidRequest",
            "window_lines must be positive",
        ));
    }
    let threshold = req
        .store_threshold_override
        .unwrap_or(svc.config.classify.store_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::bad_request(
            "InvalidRequest",
            "store_threshold_override must be in [0, 1]",
        ));
    }
    let window_lines = req.window_lines.unwrap_or(svc.config.classify.window_lines);
    // Pin the model for the whole request.
    let model = svc.active().ok_or_else(no_model)?;

    let mut wanted: Vec<(String, Option<String>, Option<String>)> = Vec::new();
    if let Some(log) = req.log {
        wanted.push(("log".into(), Some(log), None));
    }
    if let Some(uri) = req.uri {
        wanted.push((uri.clone(), None, Some(uri)));
    }
    for item in req.bundle.unwrap_or_default() {
        if item.log.is_some() == item.uri.is_some() {
            return Err(ApiError::bad_request(
                "InvalidRequest",
                format!(
                    "bundle item {:?} needs exactly one of log or uri",
                    item.name
                ),
            ));
        }
        wanted.push((item.name, item.log, item.uri));
    }

    let limits = svc.limits();
    let inputs = tokio::task::spawn_blocking(move || {
        wanted
            .into_iter()
            .map(|(name, log, uri)| match (log, uri) {
                (Some(text), _) => Input::Text {
                    name,
                    source: "inline".into(),
                    text,
                },
                (None, Some(uri)) => match fetch_text(&uri, limits) {
                    Ok(text) => Input::Text {
                        name,
                        source: uri,
                        text,
                    },
                    Err(e) => Input::Failed {
                        name,
                        source: uri,
                        message: e.to_string(),
                    },
                },
                (None, None) => unreachable!(),
            })
            .collect::<Vec<_>>()
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;

    let svc2 = svc.clone();
    let model2 = model.clone();
    let (items, to_store) = tokio::task::spawn_blocking(move || -> Result<_, PipelineError> {
        let mut items = Vec::new();
        let mut to_store = Vec::new();
        for input in inputs {
            match input {
                Input::Text { name, source, text } => {
                    let (item, recs) = svc2.classify_input(
                        &model2,
                        &name,
                        &source,
                        &text,
                        window_lines,
                        threshold,
                    )?;
                    items.push(item);
                    to_store.extend(recs);
                }
                Input::Failed {
                    name,
                    source,
                    message,
                } => items.push(ItemResult {
                    name,
                    source,
                    input_digest: None,
                    lines: None,
                    records: Vec::new(),
                    aggregate: None,
                    error: Some(json!({ "error": "FetchFailed", "message": message })),
                }),
            }
        }
        Ok((items, to_store))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(pipeline_error)?;

    let stored = to_store.len();
    svc.store.append(&to_store)?;
    Ok(ClassifyResponse {
        model_digest: model.digest.clone(),
        items,
        stored,
    })
}

async fn results_handler(
    State(svc): Svc,
    Query(q): Query<ResultQuery>,
) -> ApiResult<Json<Vec<ClassificationRecord>>> {
    Ok(Json(svc.store.query(&q)?))
}

async fn export_handler(State(svc): Svc) -> ApiResult<impl IntoResponse> {
    let dump = svc.store.export()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], dump))
}

async fn import_handler(State(svc): Svc, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let n = svc.store.import(&body)?;
    Ok(Json(json!({ "imported": n })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReclassifyRequest {
    #[serde(default)]
    record_ids: Vec<String>,
    #[serde(default)]
    input_digests: Vec<String>,
}

async fn reclassify_handler(State(svc): Svc, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: ReclassifyRequest = parse_json(&body)?;
    let model = svc.active().ok_or_else(no_model)?;
    let mut originals = Vec::new();
    for id in &req.record_ids {
        match svc.store.get(id)? {
            Some(r) => originals.push(r),
            None => {
                return Err(ApiError::not_found(
                    "UnknownRecord",
                    format!("no record {id:?}"),
                ))
            }
        }
    }
    for d in &req.input_digests {
        let found = svc.store.by_input_digest(d)?;
        // Only the first generation; reclassified copies share the digest.
        let found: Vec<_> = found
            .into_iter()
            .filter(|r| r.reclassified_from.is_none())
            .collect();
        if found.is_empty() {
            return Err(ApiError::not_found(
                "UnknownRecord",
                format!("no record with input digest {d:?}"),
            ));
        }
        originals.extend(found);
    }
    let threshold = svc.config.classify.store_threshold;
    let limits = svc.limits();
    let retain = svc.config.classify.retain_input;
    let model2 = model.clone();
    let fresh =
        tokio::task::spawn_blocking(move || -> ApiResult<Vec<(bool, ClassificationRecord)>> {
            let mut out = Vec::new();
            for old in originals {
                let text = match &old.input {
                    Some(t) => t.clone(),
                    None if old.source != "inline" => {
                        let full = fetch_text(&old.source, limits).map_err(|e| {
                            ApiError::new(
                                StatusCode::UNPROCESSABLE_ENTITY,
                                "InputUnavailable",
                                e.to_string(),
                            )
                        })?;
                        windows(&full, 1)
                            .iter()
                            .filter(|(s, _)| {
                                s.start_line >= old.window.start_line
                                    && s.end_line <= old.window.end_line
                            })
                            .map(|(_, t)| *t)
                            .collect::<String>()
                    }
                    None => {
                        return Err(ApiError::new(
                            StatusCode::UNPROCESSABLE_ENTITY,
                            "InputUnavailable",
                            format!("record {:?} kept no input text", old.record_id),
                        ))
                    }
                };
                let p = model2.artifact.classify(&text).map_err(pipeline_error)?;
                out.push((
                    p.confidence >= threshold,
                    ClassificationRecord {
                        record_id: uuid::Uuid::new_v4().to_string(),
                        timestamp: Utc::now(),
                        input_digest: old.input_digest.clone(),
                        source: old.source.clone(),
                        window: old.window,
                        label: p.label,
                        confidence: p.confidence,
                        class_scores: p.class_scores,
                        model_digest: model2.digest.clone(),
                        input: retain.then_some(text),
                        reclassified_from: Some(old.record_id.clone()),
                    },
                ));
            }
            Ok(out)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let to_store: Vec<ClassificationRecord> = fresh
        .iter()
        .filter(|(s, _)| *s)
        .map(|(_, r)| r.clone())
        .collect();
    svc.store.append(&to_store)?;
    let records: Vec<serde_json::Value> = fresh
        .into_iter()
        .map(|(stored, r)| {
            let mut v = serde_json::to_value(&r).expect("record serializes");
            v["stored"] = json!(stored);
            v
        })
        .collect();
    Ok(Json(
        json!({ "model_digest": model.digest, "records": records }),
    ))
}

async fn load_model_handler(State(svc): Svc, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let svc2 = svc.clone();
    let digest = tokio::task::spawn_blocking(move || svc2.load_model(&body))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(pipeline_error)?;
    tracing::info!(%digest, "model activated");
    model_info(&svc).map(|mut v| {
        v["digest"] = json!(digest);
        Json(v)
    })
}

fn model_info(svc: &ClassifyService) -> ApiResult<serde_json::Value> {
    let m = svc.active().ok_or_else(no_model)?;
    Ok(json!({
        "digest": m.digest,
        "loaded_at": m.loaded_at,
        "algorithm": m.artifact.model.algorithm(),
        "hyperparameters": m.artifact.hyperparameters,
        "labels": m.artifact.labels,
        "created_at": m.artifact.created_at,
        "metrics": m.artifact.metrics,
    }))
}

async fn model_info_handler(State(svc): Svc) -> ApiResult<Json<serde_json::Value>> {
    model_info(&svc).map(Json)
}

async fn metrics_handler(State(svc): Svc) -> Json<ServingMetrics> {
    Json(svc.serving_metrics())
}

async fn health_handler(State(svc): Svc) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "service": "classify",
        "version": env!("CARGO_PKG_VERSION"),
        "pid": std::process::id(),
        "uptime_s": svc.started.elapsed().as_secs_f64(),
        "model_digest": svc.active().map(|m| m.digest.clone()),
    }))
}
