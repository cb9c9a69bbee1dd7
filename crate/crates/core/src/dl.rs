//! The labelling network: a lightweight alignment head trained on frozen
//! SSL features with smoothed cross-entropy over the selected pseudo-labels.
//! Once trained it serves as the auto-labeller for the prompt-tuning stage.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cde::ProbabilityBatch;
use crate::data::{load_images_by_id, DataError, DatasetManifest, ImageBatch, Split};
use crate::encoders::{EncoderBundle, EncoderError};
use crate::optim::{AdamState, OptimizerConfig, OptimizerKind};
use crate::pseudo::PseudoLabelSet;
use crate::util::{combine_checksums, log_softmax_rows, softmax_rows, tensor_checksum};

#[derive(Debug, Error)]
pub enum DlError {
    #[error("epsilon {0} outside [0, 1)")]
    InvalidEpsilon(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("targets ({targets}) do not align with logits rows ({rows})")]
    TargetMismatch { targets: usize, rows: usize },
    #[error("pseudo-label set is empty")]
    EmptyPseudoSet,
    #[error("alignment head has not been trained")]
    UntrainedHead,
    #[error("ssl encoder changed during training (checksum mismatch)")]
    FrozenViolation,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Cross-entropy against the smoothed target q_c = (1-eps)*[c == target]
/// + eps/C. Takes logits; pass ln(p) to score exact probabilities.
pub fn smoothed_cross_entropy(
    logits: &Array2<f64>,
    targets: &[usize],
    epsilon: f64,
) -> Result<f64, DlError> {
    let (loss, _) = sce_with_grad(logits, targets, epsilon)?;
    Ok(loss)
}

/// Loss plus dL/d(logits) = (softmax - q) / B.
pub fn sce_with_grad(
    logits: &Array2<f64>,
    targets: &[usize],
    epsilon: f64,
) -> Result<(f64, Array2<f64>), DlError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(DlError::InvalidEpsilon(epsilon));
    }
    let (b, c) = (logits.nrows(), logits.ncols());
    if targets.len() != b {
        return Err(DlError::TargetMismatch {
            targets: targets.len(),
            rows: b,
        });
    }
    for &t in targets {
        if t >= c {
            return Err(DlError::LabelOutOfRange {
                label: t,
                classes: c,
            });
        }
    }
    let log_probs = log_softmax_rows(logits);
    let probs = softmax_rows(logits);
    let uniform = epsilon / c as f64;
    let mut loss = 0.0;
    let mut grad = probs;
    for (i, &t) in targets.iter().enumerate() {
        for j in 0..c {
            let q = if j == t { 1.0 - epsilon + uniform } else { uniform };
            loss -= q * log_probs[[i, j]];
            grad[[i, j]] -= q;
        }
    }
    let bf = b as f64;
    grad.mapv_inplace(|g| g / bf);
    Ok((loss / bf, grad))
}

/// Smoothed cross-entropy against soft target rows instead of hard labels:
/// q = (1-eps) * target + eps/C. Target rows must each sum to 1.
pub fn sce_soft_with_grad(
    logits: &Array2<f64>,
    target_probs: &Array2<f64>,
    epsilon: f64,
) -> Result<(f64, Array2<f64>), DlError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(DlError::InvalidEpsilon(epsilon));
    }
    let (b, c) = (logits.nrows(), logits.ncols());
    if target_probs.nrows() != b || target_probs.ncols() != c {
        return Err(DlError::TargetMismatch {
            targets: target_probs.nrows(),
            rows: b,
        });
    }
    let log_probs = log_softmax_rows(logits);
    let probs = softmax_rows(logits);
    let uniform = epsilon / c as f64;
    let mut loss = 0.0;
    let mut grad = probs;
    for i in 0..b {
        for j in 0..c {
            let q = (1.0 - epsilon) * target_probs[[i, j]] + uniform;
            loss -= q * log_probs[[i, j]];
            grad[[i, j]] -= q;
        }
    }
    let bf = b as f64;
    grad.mapv_inplace(|g| g / bf);
    Ok((loss / bf, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArch {
    Linear,
    /// One hidden ReLU layer, kept around for ablations.
    Mlp { hidden: usize },
}

/// The learned map from SSL feature space to class logits.
#[derive(Debug, Clone)]
pub struct AlignmentHead {
    pub arch: HeadArch,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Option<Array2<f64>>,
    pub b2: Option<Array1<f64>>,
    pub trained: bool,
}

pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Option<Array2<f64>>,
    pub b2: Option<Array1<f64>>,
}

impl AlignmentHead {
    pub fn new(d_in: usize, n_classes: usize, arch: HeadArch, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let r = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-r..=r))
        };
        match arch {
            HeadArch::Linear => AlignmentHead {
                arch,
                w1: init(d_in, n_classes),
                b1: Array1::zeros(n_classes),
                w2: None,
                b2: None,
                trained: false,
            },
            HeadArch::Mlp { hidden } => AlignmentHead {
                arch,
                w1: init(d_in, hidden),
                b1: Array1::zeros(hidden),
                w2: Some(init(hidden, n_classes)),
                b2: Some(Array1::zeros(n_classes)),
                trained: false,
            },
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.arch {
            HeadArch::Linear => self.w1.ncols(),
            HeadArch::Mlp { .. } => self.w2.as_ref().expect("mlp has w2").ncols(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        match self.arch {
            HeadArch::Linear => features.dot(&self.w1) + &self.b1,
            HeadArch::Mlp { .. } => {
                let mut hidden = features.dot(&self.w1) + &self.b1;
                hidden.mapv_inplace(|h| h.max(0.0));
                hidden.dot(self.w2.as_ref().expect("mlp has w2"))
                    + self.b2.as_ref().expect("mlp has b2")
            }
        }
    }

    /// Loss and parameter gradients for one batch of cached features.
    pub fn loss_and_grads(
        &self,
        features: &Array2<f64>,
        targets: &[usize],
        epsilon: f64,
    ) -> Result<(f64, HeadGrads), DlError> {
        match self.arch {
            HeadArch::Linear => {
                let logits = features.dot(&self.w1) + &self.b1;
                let (loss, g_logits) = sce_with_grad(&logits, targets, epsilon)?;
                Ok((
                    loss,
                    HeadGrads {
                        w1: features.t().dot(&g_logits),
                        b1: g_logits.sum_axis(Axis(0)),
                        w2: None,
                        b2: None,
                    },
                ))
            }
            HeadArch::Mlp { .. } => {
                let w2 = self.w2.as_ref().expect("mlp has w2");
                let b2 = self.b2.as_ref().expect("mlp has b2");
                let pre = features.dot(&self.w1) + &self.b1;
                let hidden = pre.mapv(|h| h.max(0.0));
                let logits = hidden.dot(w2) + b2;
                let (loss, g_logits) = sce_with_grad(&logits, targets, epsilon)?;
                let g_hidden = g_logits.dot(&w2.t());
                let g_pre =
                    ndarray::Zip::from(&g_hidden).and(&pre).map_collect(
                        |&g, &p| if p > 0.0 { g } else { 0.0 },
                    );
                Ok((
                    loss,
                    HeadGrads {
                        w1: features.t().dot(&g_pre),
                        b1: g_pre.sum_axis(Axis(0)),
                        w2: Some(hidden.t().dot(&g_logits)),
                        b2: Some(g_logits.sum_axis(Axis(0))),
                    },
                ))
            }
        }
    }

    pub fn param_checksum(&self) -> u64 {
        let mut parts = vec![
            tensor_checksum(self.w1.iter()),
            tensor_checksum(self.b1.iter()),
        ];
        if let Some(w2) = &self.w2 {
            parts.push(tensor_checksum(w2.iter()));
        }
        if let Some(b2) = &self.b2 {
            parts.push(tensor_checksum(b2.iter()));
        }
        combine_checksums(&parts)
    }
}

/// Which frozen encoder feeds the alignment head. The vision-encoder option
/// exists for the design ablation that swaps the SSL backbone out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Ssl,
    VlmVision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub arch: HeadArch,
    pub feature_source: FeatureSource,
    pub seed: u64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        AlignTrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch_size: 32,
            label_smoothing: 0.1,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            arch: HeadArch::Linear,
            feature_source: FeatureSource::Ssl,
            seed: 0,
        }
    }
}

/// The auto-labeller: frozen feature encoder plus trained alignment head.
#[derive(Clone)]
pub struct DLNetwork {
    pub bundle: EncoderBundle,
    pub feature_source: FeatureSource,
    pub head: AlignmentHead,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
}

impl DLNetwork {
    pub fn features(&self, batch: &ImageBatch) -> Result<Array2<f64>, DlError> {
        let emb = match self.feature_source {
            FeatureSource::Ssl => self.bundle.ssl.encode(batch)?,
            FeatureSource::VlmVision => self.bundle.vision.encode(batch)?,
        };
        Ok(emb.vectors)
    }
}

/// Train the alignment head on the pseudo-labelled samples only; every
/// encoder stays frozen. Deterministic for a fixed config seed.
pub fn train_alignment(
    bundle: &EncoderBundle,
    pseudo: &PseudoLabelSet,
    manifest: &DatasetManifest,
    config: &AlignTrainConfig,
) -> Result<DLNetwork, DlError> {
    if pseudo.is_empty() {
        return Err(DlError::EmptyPseudoSet);
    }
    let c = manifest.num_classes();
    for entry in &pseudo.entries {
        if entry.label >= c {
            return Err(DlError::LabelOutOfRange {
                label: entry.label,
                classes: c,
            });
        }
    }
    let ssl_checksum_before = bundle.ssl.param_checksum();

    // Extract features for the pseudo set once; training batches index into
    // this cache.
    let ids: Vec<String> = pseudo.entries.iter().map(|e| e.id.clone()).collect();
    let labels: Vec<usize> = pseudo.entries.iter().map(|e| e.label).collect();
    let d_in = match config.feature_source {
        FeatureSource::Ssl => bundle.d_ssl(),
        FeatureSource::VlmVision => bundle.d_vlm(),
    };
    let mut features = Array2::zeros((ids.len(), d_in));
    for (start, chunk) in ids.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
        let batch = load_images_by_id(manifest, Split::Train, chunk)?;
        let emb = match config.feature_source {
            FeatureSource::Ssl => bundle.ssl.encode(&batch)?,
            FeatureSource::VlmVision => bundle.vision.encode(&batch)?,
        };
        for (offset, row) in emb.vectors.rows().into_iter().enumerate() {
            features.row_mut(start + offset).assign(&row);
        }
    }

    let mut head = AlignmentHead::new(d_in, c, config.arch, config.seed);
    let opt_cfg = OptimizerConfig {
        kind: config.optimizer,
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: match config.optimizer {
            OptimizerKind::AdamW => config.weight_decay,
            OptimizerKind::Adam => 0.0,
        },
    };
    let mut w1_state = AdamState::new(head.w1.raw_dim());
    let mut b1_state = AdamState::new(head.b1.raw_dim());
    let mut w2_state = head.w2.as_ref().map(|w| AdamState::new(w.raw_dim()));
    let mut b2_state = head.b2.as_ref().map(|b| AdamState::new(b.raw_dim()));

    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::util::derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut batch_feats = Array2::zeros((chunk.len(), d_in));
            let mut batch_targets = Vec::with_capacity(chunk.len());
            for (i, &idx) in chunk.iter().enumerate() {
                batch_feats.row_mut(i).assign(&features.row(idx));
                batch_targets.push(labels[idx]);
            }
            let (loss, grads) =
                head.loss_and_grads(&batch_feats, &batch_targets, config.label_smoothing)?;
            w1_state.step(&mut head.w1, &grads.w1, &opt_cfg);
            b1_state.step(&mut head.b1, &grads.b1, &opt_cfg);
            if let (Some(w2), Some(gw2), Some(state)) =
                (head.w2.as_mut(), grads.w2.as_ref(), w2_state.as_mut())
            {
                state.step(w2, gw2, &opt_cfg);
            }
            if let (Some(b2), Some(gb2), Some(state)) =
                (head.b2.as_mut(), grads.b2.as_ref(), b2_state.as_mut())
            {
                state.step(b2, gb2, &opt_cfg);
            }
            epoch_loss += loss;
            batches += 1.0;
        }
        train_loss.push(epoch_loss / batches.max(1.0));
    }

    if bundle.ssl.param_checksum() != ssl_checksum_before {
        return Err(DlError::FrozenViolation);
    }
    head.trained = true;
    Ok(DLNetwork {
        bundle: bundle.clone(),
        feature_source: config.feature_source,
        head,
        train_loss,
    })
}

/// Label a batch with the trained network: softmax(head(features)).
/// Callers treat the output as constants; nothing here is differentiable.
pub fn dl_predict(dl: &DLNetwork, batch: &ImageBatch) -> Result<ProbabilityBatch, DlError> {
    if !dl.head.trained {
        return Err(DlError::UntrainedHead);
    }
    let features = dl.features(batch)?;
    let logits = dl.head.logits(&features);
    let probs = softmax_rows(&logits);
    Ok(ProbabilityBatch {
        probs,
        logits,
        logit_scale: 1.0,
    })
}

/// Top-1 accuracy of the labelling network on a split; reads ground-truth
/// labels, so this is evaluation-only.
pub fn dl_eval(
    dl: &DLNetwork,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<crate::cde::Metrics, DlError> {
    let mut truths = Vec::new();
    let mut predictions = Vec::new();
    for batch in crate::data::iterate_batches(manifest, split, 64, 0)? {
        let batch = batch?;
        let probs = dl_predict(dl, &batch)?;
        for (id, pred) in batch.ids.iter().zip(probs.argmax_labels()) {
            let record = manifest
                .record_by_id(split, id)
                .expect("batch ids come from the manifest");
            let truth = manifest
                .eval_label(record)
                .ok_or_else(|| DlError::Data(DataError::UnknownRecord(id.clone())))?;
            truths.push(truth);
            predictions.push(pred);
        }
    }
    Ok(crate::cde::Metrics::from_predictions(
        &manifest.class_names,
        &truths,
        &predictions,
    ))
}
