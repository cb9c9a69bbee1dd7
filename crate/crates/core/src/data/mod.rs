//! Dataset manifests, class-description sets, and deterministic batch
//! iteration.
//!
//! Ground-truth labels ride along in the manifest for evaluation only. They
//! are private to this module and reachable solely through
//! [`DatasetManifest::eval_label`], which counts every access so tests can
//! assert that training code never touches them.

mod batches;
mod descriptions;

pub use batches::{iterate_batches, load_images_by_id, BatchIter, ImageBatch};
pub use descriptions::{
    generate_descriptions, load_descriptions, save_descriptions, DescriptionSet,
    DescriptionSource, GenerateError, GenerateFailure, HttpLlmClient, LlmClient, LlmError,
    MockLlmClient, ENV_LLM_ENDPOINT, ENV_LLM_KEY,
};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation in field `{field}`: {detail}")]
    SchemaViolation { field: String, detail: String },
    #[error("manifest defines no classes")]
    EmptyClassList,
    #[error("description cache is missing classes: {0:?}")]
    MissingClass(Vec<String>),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("split `{0}` has no records")]
    EmptySplit(Split),
    #[error("record `{0}` not found in split")]
    UnknownRecord(String),
    #[error("batch size must be >= 1")]
    InvalidBatchSize,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode failed for {path}: {detail}")]
    ImageDecode { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One image on disk. The ground-truth label, when present, is private;
/// see [`DatasetManifest::eval_label`].
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    label: Option<usize>,
}

/// A resolved dataset: canonical class order plus train/test records.
///
/// Class order is manifest order; it is the index order for every label
/// produced anywhere downstream.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    train: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
    label_reads: Arc<AtomicU64>,
}

#[derive(Deserialize, Serialize)]
struct ManifestFile {
    name: String,
    classes: Vec<String>,
    train: Vec<RecordFile>,
    test: Vec<RecordFile>,
}

#[derive(Deserialize, Serialize)]
struct RecordFile {
    id: String,
    path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Read a record's ground-truth label. Every call is counted; training
    /// stages must leave the counter untouched.
    pub fn eval_label(&self, record: &ImageRecord) -> Option<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        record.label
    }

    /// Number of ground-truth label reads so far (shared across clones).
    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn record_by_id(&self, split: Split, id: &str) -> Option<&ImageRecord> {
        self.split(split).iter().find(|r| r.id == id)
    }

    /// Test constructor used across the crate's unit tests.
    #[doc(hidden)]
    pub fn from_parts(
        name: &str,
        class_names: Vec<String>,
        train: Vec<(String, PathBuf, Option<usize>)>,
        test: Vec<(String, PathBuf, Option<usize>)>,
    ) -> Self {
        let mk = |v: Vec<(String, PathBuf, Option<usize>)>| {
            v.into_iter()
                .map(|(id, path, label)| ImageRecord { id, path, label })
                .collect()
        };
        DatasetManifest {
            name: name.to_string(),
            class_names,
            train: mk(train),
            test: mk(test),
            label_reads: Arc::new(AtomicU64::new(0)),
        }
    }
}

/// Load and validate a dataset manifest. Record paths are resolved relative
/// to the manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| DataError::ParseError(e.to_string()))?;

    if file.classes.is_empty() {
        return Err(DataError::EmptyClassList);
    }
    if file.classes.len() < 2 {
        return Err(DataError::SchemaViolation {
            field: "classes".into(),
            detail: format!("need at least 2 classes, got {}", file.classes.len()),
        });
    }
    let mut seen = HashSet::new();
    for c in &file.classes {
        if !seen.insert(c.as_str()) {
            return Err(DataError::SchemaViolation {
                field: "classes".into(),
                detail: format!("duplicate class name `{c}`"),
            });
        }
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |records: Vec<RecordFile>, field: &str| -> Result<Vec<ImageRecord>, DataError> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let resolved = base.join(&r.path);
            if !resolved.exists() {
                return Err(DataError::SchemaViolation {
                    field: format!("{field}.path"),
                    detail: format!("unresolvable path `{}` for record `{}`", r.path, r.id),
                });
            }
            if let Some(l) = r.label {
                if l >= file.classes.len() {
                    return Err(DataError::SchemaViolation {
                        field: format!("{field}.label"),
                        detail: format!("label {l} out of range for record `{}`", r.id),
                    });
                }
            }
            out.push(ImageRecord {
                id: r.id,
                path: resolved,
                label: r.label,
            });
        }
        Ok(out)
    };
    let train = resolve(file.train, "train")?;
    let test = resolve(file.test, "test")?;

    let train_ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    if train_ids.len() != train.len() {
        return Err(DataError::SchemaViolation {
            field: "train.id".into(),
            detail: "duplicate record ids".into(),
        });
    }
    let test_ids: HashSet<&str> = test.iter().map(|r| r.id.as_str()).collect();
    if test_ids.len() != test.len() {
        return Err(DataError::SchemaViolation {
            field: "test.id".into(),
            detail: "duplicate record ids".into(),
        });
    }
    if let Some(dup) = train_ids.intersection(&test_ids).next() {
        return Err(DataError::SchemaViolation {
            field: "train/test.id".into(),
            detail: format!("record `{dup}` appears in both splits"),
        });
    }

    Ok(DatasetManifest {
        name: file.name,
        class_names: file.classes,
        train,
        test,
        label_reads: Arc::new(AtomicU64::new(0)),
    })
}
