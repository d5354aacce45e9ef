//! On-disk prediction store: one canonical json record per instance, an
//! index, and a timings file kept apart from the canonical data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RunErrorCode, RunRecord, StageTimings};
use crate::corpus::file_stem_for;

pub const STORE_FORMAT_VERSION: u32 = 1;

const RECORDS_DIR: &str = "records";
const INDEX_FILE: &str = "index.json";
const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("instance `{0}` is not in the store")]
    Missing(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub instance_id: String,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RunErrorCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    instances: Vec<IndexEntry>,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    instance_id: &'a str,
    #[serde(flatten)]
    timings: &'a StageTimings,
}

#[derive(Debug)]
pub struct PredictionStore {
    root: PathBuf,
    index: BTreeMap<String, IndexEntry>,
    timings: BTreeMap<String, StageTimings>,
}

impl PredictionStore {
    /// Creates (or resets) a store at `root`. Only files the store owns are
    /// removed; anything else in the directory is left alone.
    pub fn create(root: &Path) -> Result<Self, StoreError> {
        let records = root.join(RECORDS_DIR);
        if records.exists() {
            fs::remove_dir_all(&records).map_err(io_err(&records))?;
        }
        for f in [INDEX_FILE, TIMINGS_FILE] {
            let p = root.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
        fs::create_dir_all(&records).map_err(io_err(&records))?;
        Ok(Self {
            root: root.to_path_buf(),
            index: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let index: Index = serde_json::from_slice(&bytes).map_err(|e| StoreError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if index.format_version != STORE_FORMAT_VERSION {
            return Err(StoreError::Format {
                path,
                message: format!("unsupported format_version {}", index.format_version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            index: index
                .instances
                .into_iter()
                .map(|e| (e.instance_id.clone(), e))
                .collect(),
            timings: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put(&mut self, record: &RunRecord) -> Result<(), StoreError> {
        let file = format!("{RECORDS_DIR}/{}.json", file_stem_for(&record.instance_id));
        let path = self.root.join(&file);
        let mut bytes = serde_json::to_vec_pretty(record).expect("record serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.index.insert(
            record.instance_id.clone(),
            IndexEntry {
                instance_id: record.instance_id.clone(),
                file,
                error: record.error.as_ref().map(|e| e.code),
            },
        );
        self.timings
            .insert(record.instance_id.clone(), record.timings.clone());
        Ok(())
    }

    /// Writes the index and the timings file. Both are sorted by id.
    pub fn finish(&self) -> Result<(), StoreError> {
        let index = Index {
            format_version: STORE_FORMAT_VERSION,
            instances: self.index.values().cloned().collect(),
        };
        let path = self.root.join(INDEX_FILE);
        let mut bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(io_err(&path))?;

        let path = self.root.join(TIMINGS_FILE);
        let mut out = fs::File::create(&path).map_err(io_err(&path))?;
        for (id, t) in &self.timings {
            let line = serde_json::to_string(&TimingLine {
                instance_id: id,
                timings: t,
            })
            .expect("timings serialize");
            writeln!(out, "{line}").map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, instance_id: &str) -> Result<RunRecord, StoreError> {
        let entry = self
            .index
            .get(instance_id)
            .ok_or_else(|| StoreError::Missing(instance_id.to_string()))?;
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Format {
            path,
            message: e.to_string(),
        })
    }

    /// Every record, in instance-id order.
    pub fn load_all(&self) -> Result<Vec<RunRecord>, StoreError> {
        self.index.keys().map(|id| self.get(id)).collect()
    }
}
