//! Classification result storage behind a narrow trait, with an
//! append-only JSON-lines file backend and an in-memory backend.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpan {
    /// 0-based first line, inclusive.
    pub start_line: usize,
    /// 0-based last line, exclusive.
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub record_id: String,
    pub timestamp: DateTime<Utc>,
    /// sha256 of the whole classified input (log or bundle item).
    pub input_digest: String,
    pub source: String,
    pub window: WindowSpan,
    pub label: String,
    pub confidence: f64,
    pub class_scores: Vec<f64>,
    pub model_digest: String,
    /// Window text, absent when the service keeps digests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reclassified_from: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct ResultQuery {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
    pub label: Option<String>,
    pub min_confidence: Option<f64>,
    pub model: Option<String>,
}

impl ResultQuery {
    pub fn matches(&self, r: &ClassificationRecord) -> bool {
        self.from.is_none_or(|t| r.timestamp >= t)
            && self.to.is_none_or(|t| r.timestamp <= t)
            && self.label.as_ref().is_none_or(|l| &r.label == l)
            && self.min_confidence.is_none_or(|c| r.confidence >= c)
            && self.model.as_ref().is_none_or(|m| &r.model_digest == m)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ResultStoreError {
    #[error("result store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed result record at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub trait ResultStore: Send + Sync {
    fn backend(&self) -> &'static str;
    fn append(&self, records: &[ClassificationRecord]) -> Result<(), ResultStoreError>;
    /// Matching records in timestamp order; ties keep insertion order.
    fn query(&self, q: &ResultQuery) -> Result<Vec<ClassificationRecord>, ResultStoreError>;
    fn get(&self, record_id: &str) -> Result<Option<ClassificationRecord>, ResultStoreError>;
    fn by_input_digest(&self, digest: &str) -> Result<Vec<ClassificationRecord>, ResultStoreError>;
    fn len(&self) -> usize;
    fn flush(&self) -> Result<(), ResultStoreError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full dump as JSON lines, re-importable with [`ResultStore::import`].
    fn export(&self) -> Result<Vec<u8>, ResultStoreError> {
        let mut out = Vec::new();
        for r in self.query(&ResultQuery::default())? {
            serde_json::to_writer(&mut out, &r).expect("record serializes");
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Adds records from a dump, skipping ids already present.
    fn import(&self, dump: &[u8]) -> Result<usize, ResultStoreError> {
        let records = parse_lines(dump)?;
        let fresh: Vec<ClassificationRecord> = records
            .into_iter()
            .filter(|r| matches!(self.get(&r.record_id), Ok(None)))
            .collect();
        self.append(&fresh)?;
        Ok(fresh.len())
    }
}

fn parse_lines(dump: &[u8]) -> Result<Vec<ClassificationRecord>, ResultStoreError> {
    let mut out = Vec::new();
    for (i, line) in dump.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        out.push(
            serde_json::from_slice(line).map_err(|e| ResultStoreError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Default)]
pub struct MemoryResultStore {
    records: RwLock<Vec<ClassificationRecord>>,
}

impl MemoryResultStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ResultStore for MemoryResultStore {
    fn backend(&self) -> &'static str {
        "memory"
    }

    fn append(&self, records: &[ClassificationRecord]) -> Result<(), ResultStoreError> {
        self.records.write().unwrap().extend_from_slice(records);
        Ok(())
    }

    fn query(&self, q: &ResultQuery) -> Result<Vec<ClassificationRecord>, ResultStoreError> {
        let mut out: Vec<ClassificationRecord> = self
            .records
            .read()
            .unwrap()
            .iter()
            .filter(|r| q.matches(r))
            .cloned()
            .collect();
        out.sort_by_key(|r| r.timestamp);
        Ok(out)
    }

    fn get(&self, record_id: &str) -> Result<Option<ClassificationRecord>, ResultStoreError> {
        Ok(self
            .records
            .read()
            .unwrap()
            .iter()
            .find(|r| r.record_id == record_id)
            .cloned())
    }

    fn by_input_digest(&self, digest: &str) -> Result<Vec<ClassificationRecord>, ResultStoreError> {
        Ok(self
            .records
            .read()
            .unwrap()
            .iter()
            .filter(|r| r.input_digest == digest)
            .cloned()
            .collect())
    }

    fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    fn flush(&self) -> Result<(), ResultStoreError> {
        Ok(())
    }
}

/// Append-only JSON-lines file, mirrored in memory for queries. Writes go
/// through a single writer. Opening compacts away a torn trailing record.
pub struct FileResultStore {
    path: PathBuf,
    index: MemoryResultStore,
    writer: Mutex<BufWriter<File>>,
}

impl FileResultStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ResultStoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let index = MemoryResultStore::new();
        let mut dropped = false;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut records = Vec::new();
            let lines: Vec<Vec<u8>> = reader.split(b'\n').collect::<Result<_, _>>()?;
            let n = lines.len();
            for (i, line) in lines.into_iter().enumerate() {
                if line.is_empty() {
                    continue;
                }
                match serde_json::from_slice::<ClassificationRecord>(&line) {
                    Ok(r) => records.push(r),
                    Err(_) if i + 1 == n => dropped = true,
                    Err(e) => {
                        return Err(ResultStoreError::Malformed {
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            index.append(&records)?;
        }
        let store = Self {
            writer: Mutex::new(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(&path)?,
            )),
            path,
            index,
        };
        if dropped {
            tracing::warn!(path = %store.path.display(), "compacting result store after torn record");
            store.compact()?;
        }
        Ok(store)
    }

    /// Rewrites the file from the in-memory index via a rename, which
    /// drops any torn or partial records.
    pub fn compact(&self) -> Result<(), ResultStoreError> {
        let mut writer = self.writer.lock().unwrap();
        writer.flush()?;
        let tmp = self.path.with_extension("compact");
        std::fs::write(&tmp, self.index.export()?)?;
        std::fs::rename(&tmp, &self.path)?;
        *writer = BufWriter::new(OpenOptions::new().append(true).open(&self.path)?);
        Ok(())
    }
}

impl ResultStore for FileResultStore {
    fn backend(&self) -> &'static str {
        "file"
    }

    fn append(&self, records: &[ClassificationRecord]) -> Result<(), ResultStoreError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut writer = self.writer.lock().unwrap();
        for r in records {
            serde_json::to_writer(&mut *writer, r).expect("record serializes");
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        self.index.append(records)
    }

    fn query(&self, q: &ResultQuery) -> Result<Vec<ClassificationRecord>, ResultStoreError> {
        self.index.query(q)
    }

    fn get(&self, record_id: &str) -> Result<Option<ClassificationRecord>, ResultStoreError> {
        self.index.get(record_id)
    }

    fn by_input_digest(&self, digest: &str) -> Result<Vec<ClassificationRecord>, ResultStoreError> {
        self.index.by_input_digest(digest)
    }

    fn len(&self) -> usize {
        self.index.len()
    }

    fn flush(&self) -> Result<(), ResultStoreError> {
        let mut writer = self.writer.lock().unwrap();
        writer.flush()?;
        writer.get_ref().sync_data()?;
        Ok(())
    }
}
