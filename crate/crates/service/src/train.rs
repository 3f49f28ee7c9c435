//! The training service: ingestion, dataset administration, the training
//! job queue, scheduled retraining and model export.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use taxon_core::pipeline::{evaluate, grid_search, LeaderboardEntry};
use taxon_core::{
    deserialize_pipeline, serialize_pipeline, Dataset, EvalMetrics, LabelSet, LabeledExample,
    PipelineError,
};

use crate::config::ServiceConfig;
use crate::datasets::{DatasetStore, LabelPolicy, StoredExample, DEFAULT_DATASET};
use crate::fetch::{fetch_text, FetchLimits};
use crate::http::{
    parse_json, write_atomic, ApiError, ApiResult, Shutdown, API_PREFIX, BODY_LIMIT,
};

/// Response header carrying the artifact digest on model download.
pub const DIGEST_HEADER: &str = "x-taxon-digest";

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(Mutex<Duration>);

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        *self.0.lock().unwrap() += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobTrigger {
    Manual,
    Scheduled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub location: String,
    pub digest: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub endpoint: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub job_id: String,
    pub state: JobState,
    pub trigger: JobTrigger,
    pub dataset: String,
    pub submitted_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub artifact: Option<ArtifactRef>,
    pub metrics: Option<EvalMetrics>,
    pub best_index: Option<usize>,
    pub leaderboard: Vec<LeaderboardEntry>,
    pub error: Option<JobError>,
    pub promotions: Vec<Promotion>,
    pub report: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    #[serde(default)]
    pub dataset: Option<String>,
    /// Dotted config keys within `tokenizer`, `vectorizer` or `training`.
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
    /// Push the artifact to `schedule.promote_to` on success.
    #[serde(default)]
    pub promote: Option<bool>,
}

struct PendingJob {
    config: ServiceConfig,
    promote: bool,
}

/// The artifact produced by the latest succeeded job (or found on disk).
#[derive(Clone)]
pub struct LatestModel {
    pub job_id: Option<String>,
    pub bytes: Arc<Vec<u8>>,
    pub digest: String,
    pub metrics: Option<EvalMetrics>,
    pub summary: Value,
}

#[derive(Default)]
struct Jobs {
    by_id: BTreeMap<String, TrainingJob>,
    order: Vec<String>,
    pending: BTreeMap<String, PendingJob>,
    latest: Option<LatestModel>,
}

impl Jobs {
    fn active(&self) -> usize {
        self.by_id.values().filter(|j| j.state.is_active()).count()
    }
}

struct JobTable {
    jobs: Mutex<Jobs>,
    changed: Condvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SchedulerStats {
    pub ticks: u64,
    pub started: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickOutcome {
    NotDue,
    Disabled,
    Started(String),
    Skipped,
}

struct SchedulerState {
    next_due: Option<Duration>,
    stats: SchedulerStats,
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("a training job is running and another is queued")]
    Busy,
    #[error("{0}")]
    DatasetTooSmall(String),
    #[error("{0}")]
    InvalidOverrides(String),
    #[error(transparent)]
    Store(#[from] crate::datasets::StoreError),
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        let msg = e.to_string();
        match e {
            SubmitError::Busy => ApiError::conflict("Busy", msg),
            SubmitError::DatasetTooSmall(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "DatasetTooSmall", msg)
            }
            SubmitError::InvalidOverrides(_) => ApiError::bad_request("ConfigError", msg),
            SubmitError::Store(s) => s.into(),
        }
    }
}

pub struct TrainService {
    config: ServiceConfig,
    store: DatasetStore,
    table: JobTable,
    queue: Mutex<mpsc::Sender<String>>,
    clock: Arc<dyn Clock>,
    scheduler: Mutex<SchedulerState>,
    started: Instant,
}

fn pipeline_code(e: &PipelineError) -> &'static str {
    match e {
        PipelineError::EmptyDataset => "DatasetTooSmall",
        PipelineError::UnknownLabel(_) => "UnknownLabel",
        PipelineError::DuplicateId(_) => "DuplicateId",
        PipelineError::Malformed(_) => "Malformed",
        PipelineError::InvalidFraction(_) => "InvalidFraction",
        PipelineError::ClassTooSmall { .. } => "ClassTooSmall",
        PipelineError::InvalidFolds(_) => "InvalidFolds",
        PipelineError::InvalidGrid(_) => "InvalidGrid",
        PipelineError::LabelMismatch(_) => "LabelMismatch",
        PipelineError::VersionUnsupported(_) => "VersionUnsupported",
        PipelineError::DigestMismatch { .. } => "DigestMismatch",
        PipelineError::CorruptArtifact(_) => "CorruptArtifact",
        PipelineError::AllCandidatesFailed => "AllCandidatesFailed",
        PipelineError::Tokenize(_) => "TokenizeError",
        PipelineError::Feature(_) => "FeatureError",
        PipelineError::Model(_) => "ModelError",
    }
}

fn job_error(code: &str, message: impl ToString) -> JobError {
    JobError {
        error: code.to_owned(),
        message: message.to_string(),
    }
}

fn is_uri(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

/// POSTs raw bytes; returns the status code.
pub fn post_bytes(url: &str, bytes: &[u8], timeout: Duration) -> Result<u16, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let resp = agent
        .post(url)
        .header("content-type", "application/octet-stream")
        .send(bytes)
        .map_err(|e| e.to_string())?;
    Ok(resp.status().as_u16())
}

fn model_summary(bytes: &[u8]) -> Result<(String, Option<EvalMetrics>, Value), PipelineError> {
    let artifact = deserialize_pipeline(bytes)?;
    let digest = artifact.digest.clone().expect("digest set on load");
    let summary = json!({
        "algorithm": artifact.model.algorithm(),
        "hyperparameters": artifact.hyperparameters,
        "labels": artifact.labels,
        "created_at": artifact.created_at,
        "format_version": artifact.format_version,
    });
    Ok((digest, artifact.metrics, summary))
}

impl TrainService {
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, String> {
        let store =
            DatasetStore::open(config.data_path("datasets.jsonl")).map_err(|e| e.to_string())?;
        Self::with_parts(config, store, Arc::new(SystemClock::default()))
    }

    pub fn with_parts(
        config: ServiceConfig,
        store: DatasetStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, String> {
        let (tx, rx) = mpsc::channel::<String>();
        let interval = config.schedule.retrain_interval_s;
        let first_due = (interval > 0).then(|| clock.now() + Duration::from_secs(interval));
        let svc = Arc::new(Self {
            config,
            store,
            table: JobTable {
                jobs: Mutex::new(Jobs::default()),
                changed: Condvar::new(),
            },
            queue: Mutex::new(tx),
            clock,
            scheduler: Mutex::new(SchedulerState {
                next_due: first_due,
                stats: SchedulerStats::default(),
            }),
            started: Instant::now(),
        });
        let latest = svc.latest_path();
        if latest.is_file() {
            let bytes = std::fs::read(&latest).map_err(|e| format!("{}: {e}", latest.display()))?;
            match model_summary(&bytes) {
                Ok((digest, metrics, summary)) => {
                    tracing::info!(%digest, "found previous model");
                    svc.table.jobs.lock().unwrap().latest = Some(LatestModel {
                        job_id: None,
                        bytes: Arc::new(bytes),
                        digest,
                        metrics,
                        summary,
                    });
                }
                Err(e) => tracing::warn!(error = %e, "ignoring unreadable previous model"),
            }
        }
        let weak = Arc::downgrade(&svc);
        std::thread::Builder::new()
            .name("taxon-train-worker".into())
            .spawn(move || worker(weak, rx))
            .map_err(|e| e.to_string())?;
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &DatasetStore {
        &self.store
    }

    fn latest_path(&self) -> PathBuf {
        self.config.data_path("latest.taxon")
    }

    pub fn label_policy(&self) -> LabelPolicy {
        let labels = &self.config.training.labels;
        LabelPolicy {
            pinned: (!labels.is_empty())
                .then(|| LabelSet::new(labels.clone()).expect("validated labels")),
            allow_new: self.config.training.allow_new_labels,
        }
    }

    fn limits(&self) -> FetchLimits {
        FetchLimits {
            max_bytes: self.config.classify.fetch_max_bytes,
            timeout: Duration::from_secs(self.config.classify.fetch_timeout_s),
        }
    }

    fn effective_config(
        &self,
        overrides: &BTreeMap<String, Value>,
    ) -> Result<ServiceConfig, SubmitError> {
        if overrides.is_empty() {
            return Ok(self.config.clone());
        }
        let mut pairs = Vec::new();
        for (k, v) in overrides {
            let section = k.split('.').next().unwrap_or_default();
            if !matches!(section, "tokenizer" | "vectorizer" | "training") {
                return Err(SubmitError::InvalidOverrides(format!(
                    "override {k:?} is outside tokenizer, vectorizer and training"
                )));
            }
            let tv = toml::Value::try_from(v)
                .map_err(|e| SubmitError::InvalidOverrides(format!("{k}: {e}")))?;
            pairs.push((k.clone(), tv));
        }
        ServiceConfig::resolve(Some(&self.config.to_toml()), &pairs)
            .map_err(|e| SubmitError::InvalidOverrides(e.to_string()))
    }

    /// Enqueues a training job. One job may run while one more waits.
    pub fn submit(
        &self,
        req: StartRequest,
        trigger: JobTrigger,
    ) -> Result<TrainingJob, SubmitError> {
        let config = self.effective_config(&req.overrides)?;
        let dataset = req.dataset.unwrap_or_else(|| DEFAULT_DATASET.to_owned());
        let summary = self.store.summary(&dataset)?;
        if summary.examples < 2 || summary.per_label.len() < 2 {
            return Err(SubmitError::DatasetTooSmall(format!(
                "dataset {dataset:?} has {} examples over {} labels; training needs at least two of each",
                summary.examples,
                summary.per_label.len()
            )));
        }
        let promote = req
            .promote
            .unwrap_or(trigger == JobTrigger::Scheduled && config.schedule.auto_promote);
        let mut jobs = self.table.jobs.lock().unwrap();
        if jobs.active() >= 2 {
            return Err(SubmitError::Busy);
        }
        let job = TrainingJob {
            job_id: uuid::Uuid::new_v4().to_string(),
            state: JobState::Queued,
            trigger,
            dataset,
            submitted_at: Utc::now(),
            started_at: None,
            finished_at: None,
            artifact: None,
            metrics: None,
            best_index: None,
            leaderboard: Vec::new(),
            error: None,
            promotions: Vec::new(),
            report: None,
        };
        jobs.order.push(job.job_id.clone());
        jobs.by_id.insert(job.job_id.clone(), job.clone());
        jobs.pending
            .insert(job.job_id.clone(), PendingJob { config, promote });
        self.queue
            .lock()
            .unwrap()
            .send(job.job_id.clone())
            .expect("worker alive while service exists");
        self.table.changed.notify_all();
        Ok(job)
    }

    pub fn job(&self, id: &str) -> Option<TrainingJob> {
        self.table.jobs.lock().unwrap().by_id.get(id).cloned()
    }

    pub fn jobs(&self) -> Vec<TrainingJob> {
        let jobs = self.table.jobs.lock().unwrap();
        jobs.order.iter().map(|id| jobs.by_id[id].clone()).collect()
    }

    pub fn latest(&self) -> Option<LatestModel> {
        self.table.jobs.lock().unwrap().latest.clone()
    }

    /// Blocks until the job leaves the active states or `timeout` passes.
    pub fn wait_job(&self, id: &str, timeout: Duration) -> Option<TrainingJob> {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.table.jobs.lock().unwrap();
        loop {
            let job = jobs.by_id.get(id)?;
            if !job.state.is_active() {
                return Some(job.clone());
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            jobs = self.table.changed.wait_timeout(jobs, left).unwrap().0;
        }
    }

    /// Blocks until no job is queued or running.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.table.jobs.lock().unwrap();
        while jobs.active() > 0 {
            let Some(left) = deadline.checked_duration_since(Instant::now()) else {
                return false;
            };
            jobs = self.table.changed.wait_timeout(jobs, left).unwrap().0;
        }
        true
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut TrainingJob, &mut Option<LatestModel>)) {
        let mut guard = self.table.jobs.lock().unwrap();
        let jobs = &mut *guard;
        if let Some(job) = jobs.by_id.get_mut(id) {
            f(job, &mut jobs.latest);
        }
        self.table.changed.notify_all();
    }

    fn run_job(&self, id: &str) {
        let Some(pending) = self.table.jobs.lock().unwrap().pending.remove(id) else {
            return;
        };
        let dataset_id = match self.job(id) {
            Some(j) => j.dataset,
            None => return,
        };
        self.update(id, |j, _| {
            j.state = JobState::Running;
            j.started_at = Some(Utc::now());
        });
        tracing::info!(job = id, dataset = %dataset_id, "training started");
        match self.train(&pending.config, &dataset_id) {
            Ok(output) => {
                let location = match self.export(&pending.config, id, &output.bytes) {
                    Ok(loc) => loc,
                    Err(e) => {
                        self.fail(id, job_error("ExportFailed", e));
                        return;
                    }
                };
                let (digest, metrics, summary) = match model_summary(&output.bytes) {
                    Ok(s) => s,
                    Err(e) => {
                        self.fail(id, job_error(pipeline_code(&e), e));
                        return;
                    }
                };
                let bytes = Arc::new(output.bytes);
                let artifact = ArtifactRef {
                    location,
                    digest: digest.clone(),
                    bytes: bytes.len() as u64,
                };
                let Some(mut done) = self.job(id) else { return };
                done.state = JobState::Succeeded;
                done.finished_at = Some(Utc::now());
                done.artifact = Some(artifact);
                done.metrics = metrics.clone();
                done.best_index = Some(output.best_index);
                done.leaderboard = output.leaderboard;
                self.after_success(&mut done, &pending, &bytes);
                self.update(id, |j, latest| {
                    *j = done;
                    *latest = Some(LatestModel {
                        job_id: Some(j.job_id.clone()),
                        bytes: bytes.clone(),
                        digest: digest.clone(),
                        metrics,
                        summary,
                    });
                });
                tracing::info!(job = id, %digest, "training succeeded");
            }
            Err(e) => {
                tracing::warn!(job = id, error = %e.message, "training failed");
                self.fail(id, e);
            }
        }
    }

    fn fail(&self, id: &str, e: JobError) {
        self.update(id, |j, _| {
            j.state = JobState::Failed;
            j.finished_at = Some(Utc::now());
            j.error = Some(e);
        });
    }

    fn train(&self, config: &ServiceConfig, dataset_id: &str) -> Result<TrainOutput, JobError> {
        let started = Instant::now();
        let examples: Vec<LabeledExample> = self
            .store
            .examples(dataset_id)
            .map_err(|e| job_error("UnknownDataset", e))?
            .into_iter()
            .map(|e| e.example)
            .collect();
        let pinned = (!config.training.labels.is_empty())
            .then(|| LabelSet::new(config.training.labels.clone()).expect("validated labels"));
        let err = |e: PipelineError| job_error(pipeline_code(&e), e);
        let dataset = Dataset::new(examples, pinned).map_err(err)?;
        let (train, test) = dataset
            .split_train_test(config.training.test_fraction, config.training.seed)
            .map_err(err)?;
        let spec = config
            .grid_spec()
            .map_err(|e| job_error("ConfigError", e))?;
        let outcome = grid_search(&train, &spec).map_err(err)?;
        let mut best = outcome.best;
        let metrics = evaluate(&best, &test)
            .map_err(err)?
            .with_training_time(started.elapsed());
        best.metrics = Some(metrics);
        let bytes = serialize_pipeline(&best).map_err(err)?;
        Ok(TrainOutput {
            bytes,
            best_index: outcome.best_index,
            leaderboard: outcome.leaderboard,
        })
    }

    /// Writes the artifact to the export target and the local latest copy.
    fn export(&self, config: &ServiceConfig, id: &str, bytes: &[u8]) -> Result<String, String> {
        write_atomic(&self.latest_path(), bytes).map_err(|e| e.to_string())?;
        let target = &config.schedule.export_path;
        if is_uri(target) {
            let status = post_bytes(target, bytes, self.limits().timeout)?;
            if !(200..300).contains(&status) {
                return Err(format!("export to {target} returned HTTP {status}"));
            }
            return Ok(target.clone());
        }
        let path = config.data_path(target).join(format!("{id}.taxon"));
        write_atomic(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(path.display().to_string())
    }

    /// Promotes the artifact or, for scheduled jobs, writes an evaluation
    /// report for manual promotion. Runs before the job is published.
    fn after_success(&self, job: &mut TrainingJob, pending: &PendingJob, bytes: &[u8]) {
        if pending.promote {
            for base in &pending.config.schedule.promote_to {
                let url = format!("{}{API_PREFIX}/model", base.trim_end_matches('/'));
                let (ok, detail) = match post_bytes(&url, bytes, self.limits().timeout) {
                    Ok(s) => ((200..300).contains(&s), format!("HTTP {s}")),
                    Err(e) => (false, e),
                };
                if !ok {
                    tracing::warn!(job = %job.job_id, endpoint = %base, %detail, "promotion failed");
                }
                job.promotions.push(Promotion {
                    endpoint: base.clone(),
                    ok,
                    detail,
                });
            }
            return;
        }
        if job.trigger != JobTrigger::Scheduled {
            return;
        }
        let path = self
            .config
            .data_path("reports")
            .join(format!("{}.json", job.job_id));
        let report = json!({
            "job_id": job.job_id,
            "finished_at": job.finished_at,
            "artifact": job.artifact,
            "metrics": job.metrics,
            "best": job.best_index.map(|i| &job.leaderboard[i]),
        });
        match write_atomic(
            &path,
            &serde_json::to_vec_pretty(&report).expect("report serializes"),
        ) {
            Ok(()) => job.report = Some(path.display().to_string()),
            Err(e) => {
                tracing::warn!(job = %job.job_id, error = %e, "writing evaluation report failed")
            }
        }
    }

    /// Starts a scheduled job when the interval has elapsed. A tick that
    /// finds a job queued or running is skipped.
    pub fn run_due(&self) -> TickOutcome {
        let now = self.clock.now();
        let mut s = self.scheduler.lock().unwrap();
        let Some(due) = s.next_due else {
            return TickOutcome::Disabled;
        };
        if now < due {
            return TickOutcome::NotDue;
        }
        s.next_due = Some(now + Duration::from_secs(self.config.schedule.retrain_interval_s));
        s.stats.ticks += 1;
        if self.table.jobs.lock().unwrap().active() > 0 {
            s.stats.skipped += 1;
            tracing::warn!("scheduled retrain skipped: a job is still in progress");
            return TickOutcome::Skipped;
        }
        match self.submit(StartRequest::default(), JobTrigger::Scheduled) {
            Ok(job) => {
                s.stats.started += 1;
                TickOutcome::Started(job.job_id)
            }
            Err(e) => {
                s.stats.skipped += 1;
                tracing::warn!(error = %e, "scheduled retrain skipped");
                TickOutcome::Skipped
            }
        }
    }

    pub fn scheduler_stats(&self) -> SchedulerStats {
        self.scheduler.lock().unwrap().stats
    }

    /// Polls the scheduler until shutdown.
    pub fn spawn_scheduler(self: &Arc<Self>, shutdown: Shutdown) {
        if self.config.schedule.retrain_interval_s == 0 {
            return;
        }
        let svc = self.clone();
        let period = Duration::from_secs(self.config.schedule.retrain_interval_s)
            .min(Duration::from_secs(1));
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = shutdown.wait() => break,
                    _ = tokio::time::sleep(period) => {}
                }
                let s = svc.clone();
                let _ = tokio::task::spawn_blocking(move || s.run_due()).await;
            }
        });
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let api = Router::new()
            .route("/train/data", post(ingest_default).get(data_summary))
            .route("/train/start", post(start_handler))
            .route("/train/jobs", get(jobs_handler))
            .route("/train/jobs/{id}", get(job_handler))
            .route("/train/metrics", get(metrics_handler))
            .route("/train/model", get(model_handler))
            .route("/labels", get(labels_handler))
            .route("/datasets", post(create_dataset).get(list_datasets))
            .route("/datasets/{id}", get(get_dataset).delete(delete_dataset))
            .route(
                "/datasets/{id}/examples",
                post(ingest_dataset).get(list_examples),
            )
            .route("/datasets/{id}/export", get(export_dataset))
            .route(
                "/datasets/{id}/examples/{eid}/label",
                post(annotate_handler),
            )
            .route("/datasets/{id}/history", get(history_handler))
            .route("/health", get(health_handler));
        Router::new()
            .nest(API_PREFIX, api)
            .layer(DefaultBodyLimit::max(BODY_LIMIT))
            .with_state(self.clone())
    }
}

struct TrainOutput {
    bytes: Vec<u8>,
    best_index: usize,
    leaderboard: Vec<LeaderboardEntry>,
}

fn worker(svc: Weak<TrainService>, rx: mpsc::Receiver<String>) {
    while let Ok(id) = rx.recv() {
        let Some(svc) = svc.upgrade() else { break };
        svc.run_job(&id);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    #[default]
    Inline,
    Uri,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dataset: String,
    pub accepted: usize,
    pub rejections: Vec<Rejection>,
}

const FIELDS: [&str; 4] = ["id", "component", "label", "log"];

/// Checks one raw record; returns the four fields or a rejection reason.
fn record_fields(v: &Value) -> Result<[String; 4], String> {
    let obj = v.as_object().ok_or("record is not an object")?;
    let mut out: [String; 4] = Default::default();
    for (slot, f) in out.iter_mut().zip(FIELDS) {
        match obj.get(f) {
            None | Some(Value::Null) => return Err(format!("missing field: {f}")),
            Some(Value::String(s)) if s.is_empty() => return Err(format!("empty field: {f}")),
            Some(Value::String(s)) => *slot = s.clone(),
            Some(_) => return Err(format!("invalid field: {f} must be a string")),
        }
    }
    Ok(out)
}

/// Parses an ingestion body: a bare array (inline) or
/// `{"mode": "inline"|"uri", "examples": [...]}`.
fn parse_ingest(body: &[u8]) -> ApiResult<(IngestMode, Vec<Value>)> {
    let v: Value = parse_json(body)?;
    match v {
        Value::Array(items) => Ok((IngestMode::Inline, items)),
        Value::Object(mut o) => {
            let mode = match o.remove("mode") {
                None => IngestMode::Inline,
                Some(m) => serde_json::from_value(m)
                    .map_err(|e| ApiError::bad_request("PayloadMalformed", format!("mode: {e}")))?,
            };
            match o.remove("examples") {
                Some(Value::Array(items)) => Ok((mode, items)),
                _ => Err(ApiError::bad_request(
                    "PayloadMalformed",
                    "expected an array of examples or an object with an `examples` array",
                )),
            }
        }
        _ => Err(ApiError::bad_request(
            "PayloadMalformed",
            "expected a JSON array or object",
        )),
    }
}

impl TrainService {
    /// Validates, fetches (in uri mode) and appends a batch. Invalid
    /// records are reported individually.
    pub fn ingest(
        &self,
        dataset: &str,
        mode: IngestMode,
        records: Vec<Value>,
    ) -> Result<IngestReport, ApiError> {
        self.store.summary(dataset)?;
        let mut rejections = Vec::new();
        let mut candidates = Vec::new();
        let mut candidate_index = Vec::new();
        for (i, raw) in records.iter().enumerate() {
            let id = raw.get("id").and_then(Value::as_str).map(str::to_owned);
            let fields = match record_fields(raw) {
                Ok(f) => f,
                Err(reason) => {
                    rejections.push(Rejection {
                        index: i,
                        id,
                        reason,
                    });
                    continue;
                }
            };
            let [id, component, label, log] = fields;
            let (log, source) = match mode {
                IngestMode::Inline => (log, "inline".to_owned()),
                IngestMode::Uri => match fetch_text(&log, self.limits()) {
                    Ok(text) => (text, log),
                    Err(e) => {
                        rejections.push(Rejection {
                            index: i,
                            id: Some(id),
                            reason: e.to_string(),
                        });
                        continue;
                    }
                },
            };
            candidate_index.push(i);
            candidates.push(StoredExample {
                example: LabeledExample {
                    id,
                    component,
                    label,
                    log,
                },
                source,
            });
        }
        let ids: Vec<String> = candidates.iter().map(|c| c.example.id.clone()).collect();
        let outcomes = self
            .store
            .add_examples(dataset, candidates, &self.label_policy())?;
        let mut accepted = 0;
        for ((outcome, i), id) in outcomes.into_iter().zip(candidate_index).zip(ids) {
            match outcome {
                Ok(()) => accepted += 1,
                Err(reason) => rejections.push(Rejection {
                    index: i,
                    id: Some(id),
                    reason,
                }),
            }
        }
        rejections.sort_by_key(|r| r.index);
        Ok(IngestReport {
            dataset: dataset.to_owned(),
            accepted,
            rejections,
        })
    }
}

type Svc = State<Arc<TrainService>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

async fn ingest_into(
    svc: Arc<TrainService>,
    dataset: String,
    body: Bytes,
) -> ApiResult<Json<IngestReport>> {
    let (mode, records) = parse_ingest(&body)?;
    blocking(move || svc.ingest(&dataset, mode, records))
        .await?
        .map(Json)
}

async fn ingest_default(State(svc): Svc, body: Bytes) -> ApiResult<Json<IngestReport>> {
    ingest_into(svc, DEFAULT_DATASET.to_owned(), body).await
}

async fn ingest_dataset(
    State(svc): Svc,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<IngestReport>> {
    ingest_into(svc, id, body).await
}

async fn data_summary(State(svc): Svc) -> ApiResult<Json<Value>> {
    let s = svc.store.summary(DEFAULT_DATASET)?;
    Ok(Json(json!({
        "dataset": s.id,
        "examples": s.examples,
        "per_label": s.per_label,
        "modified_at": s.modified_at,
        "datasets": svc.store.list().len(),
    })))
}

async fn start_handler(State(svc): Svc, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: StartRequest = if body.iter().all(u8::is_ascii_whitespace) {
        StartRequest::default()
    } else {
        parse_json(&body)?
    };
    let job = svc.submit(req, JobTrigger::Manual)?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn jobs_handler(State(svc): Svc) -> Json<Vec<TrainingJob>> {
    Json(svc.jobs())
}

async fn job_handler(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<TrainingJob>> {
    svc.job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("UnknownJob", format!("no job {id:?}")))
}

fn no_model_yet() -> ApiError {
    ApiError::not_found("NoModelYet", "no training job has succeeded yet")
}

async fn metrics_handler(State(svc): Svc) -> ApiResult<Json<Value>> {
    let latest = svc.latest().ok_or_else(no_model_yet)?;
    let job = latest.job_id.as_deref().and_then(|id| svc.job(id));
    Ok(Json(json!({
        "job_id": latest.job_id,
        "digest": latest.digest,
        "metrics": latest.metrics,
        "artifact": latest.summary,
        "best_index": job.as_ref().and_then(|j| j.best_index),
        "leaderboard": job.map(|j| j.leaderboard).unwrap_or_default(),
        "scheduler": svc.scheduler_stats(),
    })))
}

async fn model_handler(State(svc): Svc) -> ApiResult<impl IntoResponse> {
    let latest = svc.latest().ok_or_else(no_model_yet)?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_owned()),
            (
                header::HeaderName::from_static(DIGEST_HEADER),
                latest.digest.clone(),
            ),
            (
                header::CONTENT_DISPOSITION,
                format!(
                    "attachment; filename=\"taxon-{}.taxon\"",
                    &latest.digest[..12]
                ),
            ),
        ],
        latest.bytes.as_ref().clone(),
    ))
}

async fn labels_handler(State(svc): Svc) -> Json<Value> {
    let policy = svc.label_policy();
    let labels = match &policy.pinned {
        Some(p) => p.as_slice().to_vec(),
        None => svc.store.known_labels(),
    };
    Json(json!({
        "labels": labels,
        "pinned": policy.pinned.is_some(),
        "allow_new": policy.pinned.is_none() && policy.allow_new,
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateDataset {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    name: Option<String>,
}

async fn create_dataset(State(svc): Svc, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateDataset = if body.iter().all(u8::is_ascii_whitespace) {
        CreateDataset::default()
    } else {
        parse_json(&body)?
    };
    let s = blocking(move || svc.store.create(req.id, req.name)).await??;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn list_datasets(State(svc): Svc) -> Json<Value> {
    Json(json!(svc.store.list()))
}

async fn get_dataset(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(svc.store.summary(&id)?)))
}

async fn delete_dataset(State(svc): Svc, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || svc.store.delete(&id)).await??;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_examples(
    State(svc): Svc,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<StoredExample>>> {
    Ok(Json(svc.store.examples(&id)?))
}

async fn export_dataset(State(svc): Svc, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let bytes = svc.store.export(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateRequest {
    new_label: String,
    #[serde(default)]
    annotator: Option<String>,
}

async fn annotate_handler(
    State(svc): Svc,
    Path((id, eid)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: AnnotateRequest = parse_json(&body)?;
    let annotator = req.annotator.unwrap_or_else(|| "anonymous".into());
    let policy = svc.label_policy();
    let record = blocking(move || {
        svc.store
            .annotate(&id, &eid, &req.new_label, &annotator, &policy)
    })
    .await??;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn history_handler(State(svc): Svc, Path(id): Path<String>) -> Json<Value> {
    Json(json!(svc.store.history(&id)))
}

async fn health_handler(State(svc): Svc) -> Json<Value> {
    let latest = svc.latest();
    let jobs = svc.jobs();
    Json(json!({
        "status": "ok",
        "service": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "pid": std::process::id(),
        "uptime_s": svc.started.elapsed().as_secs_f64(),
        "model_digest": latest.map(|l| l.digest),
        "active_jobs": jobs.iter().filter(|j| j.state.is_active()).count(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_validation_reasons() {
        let ok = json!({"id": "A-1", "component": "c", "label": "oom", "log": "x"});
        assert!(record_fields(&ok).is_ok());
        let missing = json!({"id": "A-1", "component": "c", "log": "x"});
        assert_eq!(record_fields(&missing).unwrap_err(), "missing field: label");
        let empty = json!({"id": "", "component": "c", "label": "oom", "log": "x"});
        assert_eq!(record_fields(&empty).unwrap_err(), "empty field: id");
        assert!(record_fields(&json!(3)).is_err());
    }

    #[test]
    fn ingest_body_shapes() {
        assert_eq!(parse_ingest(b"[]").unwrap().0, IngestMode::Inline);
        let (mode, items) = parse_ingest(br#"{"mode":"uri","examples":[{}]}"#).unwrap();
        assert_eq!((mode, items.len()), (IngestMode::Uri, 1));
        assert_eq!(parse_ingest(b"{nope").unwrap_err().code, "PayloadMalformed");
        assert_eq!(
            parse_ingest(br#"{"mode":"ftp","examples":[]}"#)
                .unwrap_err()
                .code,
            "PayloadMalformed"
        );
        assert_eq!(parse_ingest(b"42").unwrap_err().code, "PayloadMalformed");
    }

    #[test]
    fn manual_clock_moves_only_when_advanced() {
        let c = ManualClock::default();
        assert_eq!(c.now(), Duration::ZERO);
        c.advance(Duration::from_secs(5));
        assert_eq!(c.now(), Duration::from_secs(5));
    }
}
