//! Per-class confident-sample budget and top-k pseudo-label selection.
//!
//! The budget rule is label-free: k = clamp(floor(fraction * n_train /
//! n_classes), floor, cap) with fraction 0.2, floor 16, cap 512. Samples are
//! first assigned to their argmax class, then ranked by that class's softmax
//! probability; one sample can never be selected for two classes.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::cde::ProbabilityBatch;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("invalid counts: n_train={n_train}, n_classes={n_classes}")]
    InvalidCounts { n_train: usize, n_classes: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("probability rows ({rows}) do not align with sample ids ({ids})")]
    AlignmentMismatch { rows: usize, ids: usize },
    #[error("k must be >= 1")]
    InvalidK,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    FloorInt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub fraction: f64,
    pub floor: usize,
    pub cap: usize,
    pub rounding: Rounding,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            fraction: 0.2,
            floor: 16,
            cap: 512,
            rounding: Rounding::FloorInt,
        }
    }
}

/// Per-class sample budget from dataset statistics alone: take `fraction`
/// of the average images per class, floor it, and clamp to [floor, cap].
pub fn compute_k(
    n_train: usize,
    n_classes: usize,
    policy: &SelectionPolicy,
) -> Result<usize, SelectError> {
    if n_train < 1 || n_classes < 2 {
        return Err(SelectError::InvalidCounts { n_train, n_classes });
    }
    if !(policy.fraction > 0.0 && policy.fraction <= 1.0) {
        return Err(SelectError::InvalidPolicy(format!(
            "fraction {} outside (0, 1]",
            policy.fraction
        )));
    }
    if policy.floor > policy.cap {
        return Err(SelectError::InvalidPolicy(format!(
            "floor {} exceeds cap {}",
            policy.floor, policy.cap
        )));
    }
    let average = n_train as f64 / n_classes as f64;
    let Rounding::FloorInt = policy.rounding;
    let k = (policy.fraction * average).floor() as usize;
    Ok(k.clamp(policy.floor, policy.cap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub label: usize,
    pub confidence: f64,
}

/// The selected confident samples, at most `k_used` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
    pub k_used: usize,
    pub per_class_counts: Vec<usize>,
    pub policy: SelectionPolicy,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Assign every sample to its argmax class, rank within each class by that
/// class's probability (descending, ties broken by ascending sample id), and
/// keep the top min(k, population) per class.
pub fn select_topk(
    probs: &ProbabilityBatch,
    sample_ids: &[String],
    k: usize,
    policy: &SelectionPolicy,
) -> Result<PseudoLabelSet, SelectError> {
    if probs.len() != sample_ids.len() {
        return Err(SelectError::AlignmentMismatch {
            rows: probs.len(),
            ids: sample_ids.len(),
        });
    }
    if k == 0 {
        return Err(SelectError::InvalidK);
    }
    let c = probs.num_classes();
    let mut per_class: Vec<Vec<(f64, &String)>> = vec![Vec::new(); c];
    for (i, (row, id)) in probs
        .probs
        .rows()
        .into_iter()
        .zip(sample_ids.iter())
        .enumerate()
    {
        let label = crate::util::argmax(row);
        per_class[label].push((probs.probs[[i, label]], id));
    }
    let mut entries = Vec::new();
    let mut per_class_counts = vec![0usize; c];
    for (label, mut candidates) in per_class.into_iter().enumerate() {
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("softmax probabilities are finite")
                .then_with(|| a.1.cmp(b.1))
        });
        candidates.truncate(k);
        per_class_counts[label] = candidates.len();
        for (confidence, id) in candidates {
            entries.push(PseudoLabel {
                id: id.clone(),
                label,
                confidence,
            });
        }
    }
    Ok(PseudoLabelSet {
        entries,
        k_used: k,
        per_class_counts,
        policy: policy.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct PseudoHeader {
    version: u32,
    k_used: usize,
    policy: SelectionPolicy,
}

const PSEUDO_FORMAT_VERSION: u32 = 1;

/// Persist as JSON lines: a header line with `k_used` and the policy,
/// then one `{id, label, confidence}` line per entry.
pub fn save_pseudo_labels(set: &PseudoLabelSet, path: &Path) -> Result<(), SelectError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = PseudoHeader {
        version: PSEUDO_FORMAT_VERSION,
        k_used: set.k_used,
        policy: set.policy.clone(),
    };
    writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for entry in &set.entries {
        writeln!(file, "{}", serde_json::to_string(entry).expect("entry serializes"))?;
    }
    Ok(())
}

pub fn load_pseudo_labels(path: &Path, n_classes: usize) -> Result<PseudoLabelSet, SelectError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| SelectError::Parse("empty pseudo-label file".into()))??;
    let header: PseudoHeader =
        serde_json::from_str(&header_line).map_err(|e| SelectError::Parse(e.to_string()))?;
    if header.version != PSEUDO_FORMAT_VERSION {
        return Err(SelectError::Parse(format!(
            "unsupported pseudo-label format version {}",
            header.version
        )));
    }
    let mut entries = Vec::new();
    let mut per_class_counts = vec![0usize; n_classes];
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PseudoLabel =
            serde_json::from_str(&line).map_err(|e| SelectError::Parse(e.to_string()))?;
        if entry.label >= n_classes {
            return Err(SelectError::Parse(format!(
                "label {} out of range for {} classes",
                entry.label, n_classes
            )));
        }
        per_class_counts[entry.label] += 1;
        entries.push(entry);
    }
    Ok(PseudoLabelSet {
        entries,
        k_used: header.k_used,
        per_class_counts,
        policy: header.policy,
    })
}
