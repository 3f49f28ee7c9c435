//! Dataset store backing ingestion and annotation.
//!
//! Every mutation is appended to a JSON-lines operation log and synced
//! before it is applied in memory, so a restart replays exactly the
//! acknowledged operations. A torn final line from a crash is dropped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use taxon_core::{LabelSet, LabeledExample};

pub const DEFAULT_DATASET: &str = "default";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("dataset {0:?} already exists")]
    DatasetExists(String),
    #[error("unknown example {example:?} in dataset {dataset:?}")]
    UnknownExample { dataset: String, example: String },
    #[error("label {0:?} is not allowed")]
    UnknownLabel(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredExample {
    #[serde(flatten)]
    pub example: LabeledExample,
    /// `inline` or the URI the log was fetched from.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Store-wide sequence number; orders records with equal timestamps.
    pub seq: u64,
    pub dataset_id: String,
    pub example_id: String,
    pub annotator: String,
    pub old_label: Option<String>,
    pub new_label: String,
    pub annotated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Create {
        id: String,
        name: String,
        at: DateTime<Utc>,
    },
    Add {
        dataset: String,
        examples: Vec<StoredExample>,
        at: DateTime<Utc>,
    },
    Annotate {
        record: AnnotationRecord,
    },
    Delete {
        dataset: String,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub id: String,
    pub name: String,
    pub examples: usize,
    pub per_label: BTreeMap<String, usize>,
    pub created_at: DateTime<Utc>,
    pub modified_at: DateTime<Utc>,
}

/// Which labels ingestion and annotation accept.
#[derive(Debug, Clone, Default)]
pub struct LabelPolicy {
    pub pinned: Option<LabelSet>,
    pub allow_new: bool,
}

#[derive(Debug, Clone)]
struct DatasetState {
    name: String,
    created_at: DateTime<Utc>,
    modified_at: DateTime<Utc>,
    examples: Vec<StoredExample>,
    index: BTreeMap<String, usize>,
}

impl DatasetState {
    fn summary(&self, id: &str) -> DatasetSummary {
        let mut per_label = BTreeMap::new();
        for e in &self.examples {
            *per_label.entry(e.example.label.clone()).or_insert(0) += 1;
        }
        DatasetSummary {
            id: id.to_owned(),
            name: self.name.clone(),
            examples: self.examples.len(),
            per_label,
            created_at: self.created_at,
            modified_at: self.modified_at,
        }
    }
}

#[derive(Default)]
struct State {
    datasets: BTreeMap<String, DatasetState>,
    history: Vec<AnnotationRecord>,
    next_seq: u64,
    last_annotated: Option<DateTime<Utc>>,
}

impl State {
    fn apply(&mut self, op: Op) {
        match op {
            Op::Create { id, name, at } => {
                self.datasets.insert(
                    id,
                    DatasetState {
                        name,
                        created_at: at,
                        modified_at: at,
                        examples: Vec::new(),
                        index: BTreeMap::new(),
                    },
                );
            }
            Op::Add {
                dataset,
                examples,
                at,
            } => {
                if let Some(d) = self.datasets.get_mut(&dataset) {
                    for e in examples {
                        d.index.insert(e.example.id.clone(), d.examples.len());
                        d.examples.push(e);
                    }
                    d.modified_at = at;
                }
            }
            Op::Annotate { record } => {
                if let Some(d) = self.datasets.get_mut(&record.dataset_id) {
                    if let Some(&i) = d.index.get(&record.example_id) {
                        d.examples[i].example.label = record.new_label.clone();
                        d.modified_at = record.annotated_at;
                    }
                }
                self.next_seq = self.next_seq.max(record.seq + 1);
                self.last_annotated = Some(record.annotated_at);
                self.history.push(record);
            }
            Op::Delete { dataset, .. } => {
                self.datasets.remove(&dataset);
            }
        }
    }

    fn known_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in self.datasets.values() {
            for e in &d.examples {
                if !out.contains(&e.example.label) {
                    out.push(e.example.label.clone());
                }
            }
        }
        out
    }
}

struct Inner {
    state: State,
    log: Option<File>,
}

pub struct DatasetStore {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
}

impl DatasetStore {
    /// In-memory store with no persistence.
    pub fn in_memory() -> Self {
        let store = Self {
            inner: Mutex::new(Inner {
                state: State::default(),
                log: None,
            }),
            path: None,
        };
        store.ensure_default().expect("memory store");
        store
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut state = State::default();
        let mut good_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut offset = 0u64;
            let mut lines = reader.split(b'\n').peekable();
            let mut n = 0;
            while let Some(line) = lines.next() {
                let line = line?;
                n += 1;
                let is_last = lines.peek().is_none();
                offset += line.len() as u64 + 1;
                if line.is_empty() {
                    good_len = offset;
                    continue;
                }
                match serde_json::from_slice::<Op>(&line) {
                    Ok(op) => {
                        state.apply(op);
                        good_len = offset;
                    }
                    Err(e) if is_last => {
                        tracing::warn!(line = n, error = %e, "dropping torn final store record");
                    }
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            line: n,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .read(true)
            .open(&path)?;
        let len = log.metadata()?.len();
        if good_len < len {
            log.set_len(good_len)?;
        }
        log.seek(SeekFrom::End(0))?;
        if good_len > len {
            // Last record was intact but unterminated.
            log.write_all(b"\n")?;
        }
        let store = Self {
            inner: Mutex::new(Inner {
                state,
                log: Some(log),
            }),
            path: Some(path),
        };
        store.ensure_default()?;
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn ensure_default(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.state.datasets.contains_key(DEFAULT_DATASET) {
            commit(
                &mut inner,
                Op::Create {
                    id: DEFAULT_DATASET.into(),
                    name: "Training data".into(),
                    at: Utc::now(),
                },
            )?;
        }
        Ok(())
    }

    pub fn create(
        &self,
        id: Option<String>,
        name: Option<String>,
    ) -> Result<DatasetSummary, StoreError> {
        let id = id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        if id.is_empty() || id.contains('/') {
            return Err(StoreError::Invalid(format!("bad dataset id {id:?}")));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.state.datasets.contains_key(&id) {
            return Err(StoreError::DatasetExists(id));
        }
        commit(
            &mut inner,
            Op::Create {
                id: id.clone(),
                name: name.unwrap_or_else(|| id.clone()),
                at: Utc::now(),
            },
        )?;
        Ok(inner.state.datasets[&id].summary(&id))
    }

    pub fn list(&self) -> Vec<DatasetSummary> {
        let inner = self.inner.lock().unwrap();
        inner
            .state
            .datasets
            .iter()
            .map(|(id, d)| d.summary(id))
            .collect()
    }

    pub fn summary(&self, dataset: &str) -> Result<DatasetSummary, StoreError> {
        let inner = self.inner.lock().unwrap();
        inner
            .state
            .datasets
            .get(dataset)
            .map(|d| d.summary(dataset))
            .ok_or_else(|| StoreError::UnknownDataset(dataset.into()))
    }

    /// Appends the valid candidates in one committed operation. Returns a
    /// per-candidate outcome in input order.
    pub fn add_examples(
        &self,
        dataset: &str,
        candidates: Vec<StoredExample>,
        policy: &LabelPolicy,
    ) -> Result<Vec<Result<(), String>>, StoreError> {
        let mut inner = self.inner.lock().unwrap();
        let d = inner
            .state
            .datasets
            .get(dataset)
            .ok_or_else(|| StoreError::UnknownDataset(dataset.into()))?;
        let mut outcomes = Vec::with_capacity(candidates.len());
        let mut accepted: Vec<StoredExample> = Vec::new();
        for c in candidates {
            let id = &c.example.id;
            let outcome =
                if d.index.contains_key(id) || accepted.iter().any(|a| &a.example.id == id) {
                    Err(format!("duplicate id: {id}"))
                } else if policy
                    .pinned
                    .as_ref()
                    .is_some_and(|p| !p.contains(&c.example.label))
                {
                    Err(format!("unknown label: {}", c.example.label))
                } else {
                    accepted.push(c);
                    Ok(())
                };
            outcomes.push(outcome);
        }
        if !accepted.is_empty() {
            commit(
                &mut inner,
                Op::Add {
                    dataset: dataset.into(),
                    examples: accepted,
                    at: Utc::now(),
                },
            )?;
        }
        Ok(outcomes)
    }

    pub fn delete(&self, dataset: &str) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.state.datasets.contains_key(dataset) {
            return Err(StoreError::UnknownDataset(dataset.into()));
        }
        commit(
            &mut inner,
            Op::Delete {
                dataset: dataset.into(),
                at: Utc::now(),
            },
        )
    }

    pub fn examples(&self, dataset: &str) -> Result<Vec<StoredExample>, StoreError> {
        let inner = self.inner.lock().unwrap();
        inner
            .state
            .datasets
            .get(dataset)
            .map(|d| d.examples.clone())
            .ok_or_else(|| StoreError::UnknownDataset(dataset.into()))
    }

    /// The dataset as a JSON array of `{id, component, label, log}`.
    /// Identical content always yields identical bytes.
    pub fn export(&self, dataset: &str) -> Result<Vec<u8>, StoreError> {
        let examples: Vec<LabeledExample> = self
            .examples(dataset)?
            .into_iter()
            .map(|e| e.example)
            .collect();
        Ok(serde_json::to_vec_pretty(&examples).expect("examples serialize"))
    }

    pub fn annotate(
        &self,
        dataset: &str,
        example: &str,
        new_label: &str,
        annotator: &str,
        policy: &LabelPolicy,
    ) -> Result<AnnotationRecord, StoreError> {
        if new_label.is_empty() {
            return Err(StoreError::Invalid("new label is empty".into()));
        }
        let mut inner = self.inner.lock().unwrap();
        let d = inner
            .state
            .datasets
            .get(dataset)
            .ok_or_else(|| StoreError::UnknownDataset(dataset.into()))?;
        let &i = d
            .index
            .get(example)
            .ok_or_else(|| StoreError::UnknownExample {
                dataset: dataset.into(),
                example: example.into(),
            })?;
        let old_label = d.examples[i].example.label.clone();
        let allowed = match &policy.pinned {
            Some(p) => p.contains(new_label),
            None => policy.allow_new || inner.state.known_labels().iter().any(|l| l == new_label),
        };
        if !allowed {
            return Err(StoreError::UnknownLabel(new_label.into()));
        }
        let now = Utc::now();
        let annotated_at = inner.state.last_annotated.map_or(now, |prev| prev.max(now));
        let record = AnnotationRecord {
            seq: inner.state.next_seq,
            dataset_id: dataset.into(),
            example_id: example.into(),
            annotator: annotator.into(),
            old_label: Some(old_label),
            new_label: new_label.into(),
            annotated_at,
        };
        commit(
            &mut inner,
            Op::Annotate {
                record: record.clone(),
            },
        )?;
        Ok(record)
    }

    /// Annotation history of a dataset, including after its deletion.
    pub fn history(&self, dataset: &str) -> Vec<AnnotationRecord> {
        let inner = self.inner.lock().unwrap();
        inner
            .state
            .history
            .iter()
            .filter(|r| r.dataset_id == dataset)
            .cloned()
            .collect()
    }

    pub fn known_labels(&self) -> Vec<String> {
        self.inner.lock().unwrap().state.known_labels()
    }
}

/// Write-ahead: the operation is durable before it becomes visible.
fn commit(inner: &mut Inner, op: Op) -> Result<(), StoreError> {
    if let Some(log) = inner.log.as_mut() {
        let mut line = serde_json::to_vec(&op).expect("op serializes");
        line.push(b'\n');
        log.write_all(&line)?;
        log.sync_data()?;
    }
    inner.state.apply(op);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, label: &str) -> StoredExample {
        StoredExample {
            example: LabeledExample::new(id, "comp", label, format!("log of {id}")),
            source: "inline".into(),
        }
    }

    fn open_policy() -> LabelPolicy {
        LabelPolicy {
            pinned: None,
            allow_new: true,
        }
    }

    #[test]
    fn export_of_empty_dataset_is_empty_array() {
        let s = DatasetStore::in_memory();
        s.create(Some("d".into()), None).unwrap();
        assert_eq!(
            serde_json::from_slice::<Vec<LabeledExample>>(&s.export("d").unwrap()).unwrap(),
            vec![]
        );
    }

    #[test]
    fn export_keeps_field_layout_and_is_stable() {
        let s = DatasetStore::in_memory();
        s.create(Some("d".into()), None).unwrap();
        s.add_examples(
            "d",
            vec![ex("J-1", "network"), ex("J-2", "oom")],
            &open_policy(),
        )
        .unwrap();
        let bytes = s.export("d").unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        let pos: Vec<usize> = ["\"id\"", "\"component\"", "\"label\"", "\"log\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(!text.contains("source"));
        assert_eq!(s.export("d").unwrap(), bytes);
    }

    #[test]
    fn annotation_history_survives_delete_and_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("datasets.jsonl");
        {
            let s = DatasetStore::open(&path).unwrap();
            s.create(Some("d".into()), None).unwrap();
            s.add_examples("d", vec![ex("J-1", "network")], &open_policy())
                .unwrap();
            let r = s
                .annotate("d", "J-1", "hardware", "ann", &open_policy())
                .unwrap();
            assert_eq!(r.old_label.as_deref(), Some("network"));
            assert_eq!(r.new_label, "hardware");
            s.annotate("d", "J-1", "network", "ann", &open_policy())
                .unwrap();
            s.delete("d").unwrap();
        }
        let s = DatasetStore::open(&path).unwrap();
        let h = s.history("d");
        assert_eq!(h.len(), 2);
        assert!(h[0].seq < h[1].seq && h[0].annotated_at <= h[1].annotated_at);
        assert!(matches!(s.summary("d"), Err(StoreError::UnknownDataset(_))));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("datasets.jsonl");
        {
            let s = DatasetStore::open(&path).unwrap();
            s.add_examples(DEFAULT_DATASET, vec![ex("a", "x")], &open_policy())
                .unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"op\":\"add\",\"dataset\":\"def").unwrap();
        drop(f);
        let s = DatasetStore::open(&path).unwrap();
        assert_eq!(s.examples(DEFAULT_DATASET).unwrap().len(), 1);
        s.add_examples(DEFAULT_DATASET, vec![ex("b", "x")], &open_policy())
            .unwrap();
        drop(s);
        assert_eq!(
            DatasetStore::open(&path)
                .unwrap()
                .examples(DEFAULT_DATASET)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn unknown_example_writes_nothing() {
        let s = DatasetStore::in_memory();
        assert!(matches!(
            s.annotate(DEFAULT_DATASET, "nope", "x", "a", &open_policy()),
            Err(StoreError::UnknownExample { .. })
        ));
        assert!(s.history(DEFAULT_DATASET).is_empty());
    }

    #[test]
    fn pinned_labels_and_duplicates_are_rejected_per_record() {
        let s = DatasetStore::in_memory();
        let pinned = LabelPolicy {
            pinned: Some(LabelSet::new(["oom", "network"]).unwrap()),
            allow_new: false,
        };
        let out = s
            .add_examples(
                DEFAULT_DATASET,
                vec![ex("1", "oom"), ex("2", "disk"), ex("1", "oom")],
                &pinned,
            )
            .unwrap();
        assert!(out[0].is_ok());
        assert_eq!(out[1].as_ref().unwrap_err(), "unknown label: disk");
        assert!(out[2].as_ref().unwrap_err().starts_with("duplicate id"));
        assert!(matches!(
            s.annotate(DEFAULT_DATASET, "1", "disk", "a", &pinned),
            Err(StoreError::UnknownLabel(_))
        ));
        let closed = LabelPolicy {
            pinned: None,
            allow_new: false,
        };
        assert!(s
            .annotate(DEFAULT_DATASET, "1", "brand-new", "a", &closed)
            .is_err());
        assert!(s
            .annotate(DEFAULT_DATASET, "1", "oom", "a", &closed)
            .is_ok());
    }
}
