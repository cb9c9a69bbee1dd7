//! Class-description-embedding classifier: rows are renormalized means of
//! per-class description embeddings, predictions are a temperature-scaled
//! softmax over cosine similarities.

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::data::{iterate_batches, DataError, DatasetManifest, DescriptionSet, Split};
use crate::encoders::{encode_image, EmbeddingBatch, EncoderBundle, EncoderError};
use crate::util::{argmax, l2_norm, softmax_rows};

#[derive(Debug, Error)]
pub enum CdeError {
    #[error("class `{0}` has no descriptions")]
    EmptyClass(String),
    #[error("class `{0}`: description embeddings cancel to a near-zero mean (norm {1:.2e})")]
    DegenerateClass(String, f64),
    #[error("dimension mismatch: classifier d={classifier}, features d={features}")]
    DimMismatch { classifier: usize, features: usize },
    #[error("logit scale must be positive, got {0}")]
    InvalidLogitScale(f64),
    #[error("features must be L2-normalized before prediction")]
    UnnormalizedFeatures,
    #[error("record `{0}` has no ground-truth label; cannot score this split")]
    MissingLabel(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The class-embedding classifier. Row order follows the manifest class
/// order carried by the description set.
#[derive(Debug, Clone)]
pub struct CDEClassifier {
    pub weights: Array2<f64>,
    pub class_names: Vec<String>,
    pub row_normalized: bool,
}

impl CDEClassifier {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Softmax probabilities with the logits they came from.
#[derive(Debug, Clone)]
pub struct ProbabilityBatch {
    pub probs: Array2<f64>,
    pub logits: Array2<f64>,
    pub logit_scale: f64,
}

impl ProbabilityBatch {
    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Argmax class per row; ties resolve to the lowest class index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.probs.axis_iter(Axis(0)).map(|r| argmax(r)).collect()
    }
}

/// Build the classifier: each class row is the renormalized mean of that
/// class's description embeddings. Descriptions are embedded pre-normalized
/// and summed in a canonical (sorted) order so a permuted description list
/// yields a bit-identical row.
pub fn build_cde(
    descriptions: &DescriptionSet,
    bundle: &EncoderBundle,
) -> Result<CDEClassifier, CdeError> {
    let d = bundle.text.dim();
    let mut weights = Array2::zeros((descriptions.class_order.len(), d));
    for (c, class) in descriptions.class_order.iter().enumerate() {
        let descs = descriptions
            .descriptions_for(class)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| CdeError::EmptyClass(class.clone()))?;
        let mut sorted: Vec<String> = descs.to_vec();
        sorted.sort();
        let embedded = bundle.text.encode(&sorted)?;
        let mut mean = Array1::zeros(d);
        for row in embedded.vectors.rows() {
            mean += &row;
        }
        mean /= sorted.len() as f64;
        let norm = l2_norm(mean.view());
        if norm < 1e-8 {
            return Err(CdeError::DegenerateClass(class.clone(), norm));
        }
        mean /= norm;
        weights.row_mut(c).assign(&mean);
    }
    Ok(CDEClassifier {
        weights,
        class_names: descriptions.class_order.clone(),
        row_normalized: true,
    })
}

/// Cosine-similarity logits scaled by `logit_scale`, then a row softmax.
/// Cosine normalizes both sides, so positive rescaling of classifier rows
/// cannot change the result.
pub fn predict(
    classifier: &CDEClassifier,
    features: &EmbeddingBatch,
    logit_scale: f64,
) -> Result<ProbabilityBatch, CdeError> {
    if !(logit_scale > 0.0) {
        return Err(CdeError::InvalidLogitScale(logit_scale));
    }
    if features.dim() != classifier.dim() {
        return Err(CdeError::DimMismatch {
            classifier: classifier.dim(),
            features: features.dim(),
        });
    }
    if !features.normalized {
        return Err(CdeError::UnnormalizedFeatures);
    }
    let b = features.len();
    let c = classifier.num_classes();
    let mut logits = Array2::zeros((b, c));
    let row_norms: Vec<f64> = classifier
        .weights
        .rows()
        .into_iter()
        .map(|r| l2_norm(r).max(1e-12))
        .collect();
    for (i, f) in features.vectors.rows().into_iter().enumerate() {
        let f_norm = l2_norm(f).max(1e-12);
        for (j, w) in classifier.weights.rows().into_iter().enumerate() {
            logits[[i, j]] = logit_scale * f.dot(&w) / (f_norm * row_norms[j]);
        }
    }
    let probs = softmax_rows(&logits);
    Ok(ProbabilityBatch {
        probs,
        logits,
        logit_scale,
    })
}

/// Per-class and overall top-1 accuracy with confusion counts.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub total: usize,
    pub per_class: Vec<ClassMetric>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassMetric {
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl ClassMetric {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl Metrics {
    pub fn from_predictions(
        class_names: &[String],
        truths: &[usize],
        predictions: &[usize],
    ) -> Metrics {
        let c = class_names.len();
        let mut per_class: Vec<ClassMetric> = class_names
            .iter()
            .map(|name| ClassMetric {
                name: name.clone(),
                correct: 0,
                total: 0,
            })
            .collect();
        let mut confusion = vec![vec![0u64; c]; c];
        let mut correct = 0;
        for (&t, &p) in truths.iter().zip(predictions) {
            per_class[t].total += 1;
            confusion[t][p] += 1;
            if t == p {
                per_class[t].correct += 1;
                correct += 1;
            }
        }
        Metrics {
            top1: if truths.is_empty() {
                0.0
            } else {
                correct as f64 / truths.len() as f64
            },
            total: truths.len(),
            per_class,
            confusion,
        }
    }
}

/// Zero-shot evaluation of a classifier over one split. This is an
/// evaluation operation: it is the code path that reads ground-truth labels.
pub fn zero_shot_eval(
    classifier: &CDEClassifier,
    bundle: &EncoderBundle,
    manifest: &DatasetManifest,
    split: Split,
    logit_scale: f64,
) -> Result<Metrics, CdeError> {
    let mut truths = Vec::new();
    let mut predictions = Vec::new();
    for batch in iterate_batches(manifest, split, 64, 0)? {
        let batch = batch?;
        let features = encode_image(bundle, &batch)?;
        let probs = predict(classifier, &features, logit_scale)?;
        let labels = probs.argmax_labels();
        for (id, pred) in batch.ids.iter().zip(labels) {
            let record = manifest
                .record_by_id(split, id)
                .expect("batch ids come from the manifest");
            let truth = manifest
                .eval_label(record)
                .ok_or_else(|| CdeError::MissingLabel(id.clone()))?;
            truths.push(truth);
            predictions.push(pred);
        }
    }
    Ok(Metrics::from_predictions(
        &manifest.class_names,
        &truths,
        &predictions,
    ))
}
