//! Stage-artifact persistence: a JSON container with a version field, a
//! kind tag, and a payload checksum. Floats round-trip exactly at stored
//! precision.

use ndarray::{Array1, Array2};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::cde::CDEClassifier;
use crate::dl::{AlignmentHead, HeadArch};
use crate::encoders::PromptSet;
use crate::tune::{EpochLog, TunedModel};
use crate::util::fnv1a64;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    Missing(std::path::PathBuf),
    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("kind mismatch: file holds `{found}`, expected `{expected}`")]
    KindMismatch { found: String, expected: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Container {
    version: u32,
    kind: String,
    header: serde_json::Value,
    payload: serde_json::Value,
    checksum: String,
}

fn payload_checksum(payload: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(payload).expect("payload serializes");
    format!("{:016x}", fnv1a64(canonical.as_bytes()))
}

pub fn save_container<H: Serialize, P: Serialize>(
    path: &Path,
    kind: &str,
    header: &H,
    payload: &P,
) -> Result<(), CheckpointError> {
    let payload = serde_json::to_value(payload).expect("payload serializes");
    let container = Container {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        checksum: payload_checksum(&payload),
        header: serde_json::to_value(header).expect("header serializes"),
        payload,
    };
    let text = serde_json::to_string(&container).expect("container serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_container<H: DeserializeOwned, P: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(H, P), CheckpointError> {
    if !path.exists() {
        return Err(CheckpointError::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let container: Container =
        serde_json::from_str(&text).map_err(|e| CheckpointError::CorruptFile(e.to_string()))?;
    if container.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: container.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if container.kind != kind {
        return Err(CheckpointError::KindMismatch {
            found: container.kind,
            expected: kind.to_string(),
        });
    }
    if payload_checksum(&container.payload) != container.checksum {
        return Err(CheckpointError::CorruptFile(
            "payload checksum mismatch".into(),
        ));
    }
    let header = serde_json::from_value(container.header)
        .map_err(|e| CheckpointError::CorruptFile(e.to_string()))?;
    let payload = serde_json::from_value(container.payload)
        .map_err(|e| CheckpointError::CorruptFile(e.to_string()))?;
    Ok((header, payload))
}

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>, CheckpointError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(nrows * ncols);
    for r in rows {
        if r.len() != ncols {
            return Err(CheckpointError::CorruptFile("ragged matrix".into()));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| CheckpointError::CorruptFile(e.to_string()))
}

// --- classifier -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct CdeHeader {
    pub dataset: String,
    pub class_names: Vec<String>,
    pub d: usize,
    pub row_normalized: bool,
    pub builder_version: String,
}

#[derive(Serialize, Deserialize)]
struct CdePayload {
    weights: Vec<Vec<f64>>,
}

pub fn save_cde(path: &Path, dataset: &str, classifier: &CDEClassifier) -> Result<(), CheckpointError> {
    let header = CdeHeader {
        dataset: dataset.to_string(),
        class_names: classifier.class_names.clone(),
        d: classifier.dim(),
        row_normalized: classifier.row_normalized,
        builder_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let payload = CdePayload {
        weights: matrix_to_rows(&classifier.weights),
    };
    save_container(path, "cde_classifier", &header, &payload)
}

pub fn load_cde(path: &Path) -> Result<CDEClassifier, CheckpointError> {
    let (header, payload): (CdeHeader, CdePayload) = load_container(path, "cde_classifier")?;
    Ok(CDEClassifier {
        weights: rows_to_matrix(&payload.weights)?,
        class_names: header.class_names,
        row_normalized: header.row_normalized,
    })
}

// --- alignment head -------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct HeadHeader {
    pub dataset: String,
    pub d_in: usize,
    pub classes: usize,
    pub arch: HeadArch,
    pub epochs: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub trained: bool,
}

#[derive(Serialize, Deserialize)]
struct HeadPayload {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Option<Vec<Vec<f64>>>,
    b2: Option<Vec<f64>>,
    train_loss: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn save_head(
    path: &Path,
    dataset: &str,
    head: &AlignmentHead,
    train_loss: &[f64],
    epochs: usize,
    lr: f64,
    epsilon: f64,
    seed: u64,
) -> Result<(), CheckpointError> {
    let header = HeadHeader {
        dataset: dataset.to_string(),
        d_in: head.d_in(),
        classes: head.n_classes(),
        arch: head.arch,
        epochs,
        lr,
        epsilon,
        seed,
        trained: head.trained,
    };
    let payload = HeadPayload {
        w1: matrix_to_rows(&head.w1),
        b1: head.b1.to_vec(),
        w2: head.w2.as_ref().map(matrix_to_rows),
        b2: head.b2.as_ref().map(|b| b.to_vec()),
        train_loss: train_loss.to_vec(),
    };
    save_container(path, "alignment_head", &header, &payload)
}

pub fn load_head(path: &Path) -> Result<(AlignmentHead, Vec<f64>), CheckpointError> {
    let (header, payload): (HeadHeader, HeadPayload) = load_container(path, "alignment_head")?;
    let head = AlignmentHead {
        arch: header.arch,
        w1: rows_to_matrix(&payload.w1)?,
        b1: Array1::from_vec(payload.b1),
        w2: payload.w2.as_deref().map(rows_to_matrix).transpose()?,
        b2: payload.b2.map(Array1::from_vec),
        trained: header.trained,
    };
    Ok((head, payload.train_loss))
}

// --- tuned model ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct TunedHeader {
    pub dataset: String,
    pub v: usize,
    pub d_model: usize,
    pub classes: usize,
    pub logit_scale: f64,
    pub config: serde_json::Value,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TunedPayload {
    prompts: Vec<Vec<f64>>,
    classifier: Vec<Vec<f64>>,
    class_names: Vec<String>,
    row_normalized: bool,
    train_log: Vec<EpochLog>,
}

pub fn save_tuned(
    path: &Path,
    dataset: &str,
    model: &TunedModel,
    config: &impl Serialize,
    seed: u64,
) -> Result<(), CheckpointError> {
    let header = TunedHeader {
        dataset: dataset.to_string(),
        v: model.prompts.count(),
        d_model: model.prompts.d_model(),
        classes: model.classifier.num_classes(),
        logit_scale: model.logit_scale,
        config: serde_json::to_value(config).expect("config serializes"),
        seed,
    };
    let payload = TunedPayload {
        prompts: matrix_to_rows(&model.prompts.tokens),
        classifier: matrix_to_rows(&model.classifier.weights),
        class_names: model.classifier.class_names.clone(),
        row_normalized: model.classifier.row_normalized,
        train_log: model.train_log.clone(),
    };
    save_container(path, "tuned_model", &header, &payload)
}

pub fn load_tuned(path: &Path) -> Result<TunedModel, CheckpointError> {
    let (header, payload): (TunedHeader, TunedPayload) = load_container(path, "tuned_model")?;
    let tokens = if payload.prompts.is_empty() {
        Array2::zeros((0, header.d_model))
    } else {
        rows_to_matrix(&payload.prompts)?
    };
    Ok(TunedModel {
        prompts: PromptSet { tokens },
        classifier: CDEClassifier {
            weights: rows_to_matrix(&payload.classifier)?,
            class_names: payload.class_names,
            row_normalized: payload.row_normalized,
        },
        logit_scale: header.logit_scale,
        train_log: payload.train_log,
    })
}
