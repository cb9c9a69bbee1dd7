//! Stage (c): learn visual prompt tokens and refine the classifier against
//! labelling-network predictions. Pseudo-labels come from the untouched weak
//! view; gradients come from the strongly augmented view. Encoders stay
//! frozen; only the prompt tokens and the classifier matrix train.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{strong_augment, weak_augment, AugmentationPipeline};
use crate::cde::{predict, CdeError, CDEClassifier, Metrics, ProbabilityBatch};
use crate::data::{iterate_batches, DataError, DatasetManifest, ImageBatch, Split};
use crate::dl::{dl_predict, sce_soft_with_grad, sce_with_grad, DLNetwork, DlError};
use crate::encoders::{encode_image_prompted, EncoderBundle, EncoderError, PromptSet};
use crate::optim::{AdamState, OptimizerConfig, OptimizerKind};
use crate::util::{derive_seed, l2_norm};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("pseudo-labeller is not trained")]
    UntrainedDL,
    #[error("classifier dimension {classifier} does not match encoder dimension {encoder}")]
    DimMismatch { classifier: usize, encoder: usize },
    #[error("prompt count must be >= 1 (got {0})")]
    InvalidPromptCount(usize),
    #[error(transparent)]
    Cde(#[from] CdeError),
    #[error(transparent)]
    Dl(#[from] DlError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Anything that can pseudo-label a weak view. The trained labelling
/// network is the default; the classifier-only variant exists for the
/// design ablation.
pub trait PseudoLabeller {
    fn label_probs(&self, batch: &ImageBatch) -> Result<ProbabilityBatch, TuneError>;
    fn is_trained(&self) -> bool;
    fn name(&self) -> &'static str;
}

impl PseudoLabeller for DLNetwork {
    fn label_probs(&self, batch: &ImageBatch) -> Result<ProbabilityBatch, TuneError> {
        Ok(dl_predict(self, batch)?)
    }

    fn is_trained(&self) -> bool {
        self.head.trained
    }

    fn name(&self) -> &'static str {
        "dl_network"
    }
}

/// Pseudo-labels straight from a frozen classifier over plain image
/// embeddings.
pub struct CdeLabeller {
    pub bundle: EncoderBundle,
    pub classifier: CDEClassifier,
    pub logit_scale: f64,
}

impl PseudoLabeller for CdeLabeller {
    fn label_probs(&self, batch: &ImageBatch) -> Result<ProbabilityBatch, TuneError> {
        let features = self.bundle.vision.encode(batch)?;
        Ok(predict(&self.classifier, &features, self.logit_scale)?)
    }

    fn is_trained(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "cde"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTuneConfig {
    pub num_prompts: usize,
    pub lr: f64,
    /// Auto-reduced to the split size on small datasets.
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub logit_scale: f64,
    pub seed: u64,
    pub train_prompts: bool,
    pub train_classifier: bool,
    /// Consume the labeller output as a soft distribution instead of a hard
    /// argmax label.
    pub soft_targets: bool,
    /// Stop after this many epochs without training-loss improvement.
    pub patience: Option<usize>,
    pub augment: AugmentationPipeline,
}

impl Default for PromptTuneConfig {
    fn default() -> Self {
        Self::preset_main()
    }
}

impl PromptTuneConfig {
    /// AdamW at 2e-3.
    pub fn preset_main() -> Self {
        PromptTuneConfig {
            num_prompts: 16,
            lr: 2e-3,
            batch_size: 512,
            epochs: 30,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            logit_scale: 100.0,
            seed: 0,
            train_prompts: true,
            train_classifier: true,
            soft_targets: false,
            patience: None,
            augment: AugmentationPipeline::strong_default(),
        }
    }

    /// Adam at 4e-3.
    pub fn preset_suppl() -> Self {
        PromptTuneConfig {
            lr: 4e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            ..Self::preset_main()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub test_top1: Option<f64>,
    pub wall_seconds: f64,
}

/// Tuned prompts plus the refined classifier.
#[derive(Debug, Clone)]
pub struct TunedModel {
    pub prompts: PromptSet,
    pub classifier: CDEClassifier,
    pub logit_scale: f64,
    pub train_log: Vec<EpochLog>,
}

/// Cosine logits between features and classifier rows, with the
/// vector-Jacobian products needed for training both sides.
struct CosineCache {
    logits: Array2<f64>,
    cosines: Array2<f64>,
    f_norms: Vec<f64>,
    w_norms: Vec<f64>,
    scale: f64,
}

fn cosine_forward(features: &Array2<f64>, weights: &Array2<f64>, scale: f64) -> CosineCache {
    let b = features.nrows();
    let c = weights.nrows();
    let f_norms: Vec<f64> = features.rows().into_iter().map(|r| l2_norm(r).max(1e-12)).collect();
    let w_norms: Vec<f64> = weights.rows().into_iter().map(|r| l2_norm(r).max(1e-12)).collect();
    let mut cosines = Array2::zeros((b, c));
    for i in 0..b {
        for j in 0..c {
            cosines[[i, j]] =
                features.row(i).dot(&weights.row(j)) / (f_norms[i] * w_norms[j]);
        }
    }
    CosineCache {
        logits: &cosines * scale,
        cosines,
        f_norms,
        w_norms,
        scale,
    }
}

/// dL/d(features) and dL/d(weights) given dL/d(logits).
fn cosine_backward(
    cache: &CosineCache,
    features: &Array2<f64>,
    weights: &Array2<f64>,
    g_logits: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let b = features.nrows();
    let c = weights.nrows();
    let d = features.ncols();
    let mut g_f = Array2::zeros((b, d));
    let mut g_w = Array2::zeros((c, d));
    for i in 0..b {
        let fr = features.row(i);
        let nf = cache.f_norms[i];
        for j in 0..c {
            let g = g_logits[[i, j]];
            if g == 0.0 {
                continue;
            }
            let wr = weights.row(j);
            let nw = cache.w_norms[j];
            let cos = cache.cosines[[i, j]];
            let coeff = g * cache.scale;
            for k in 0..d {
                g_f[[i, k]] += coeff * (wr[k] / (nf * nw) - cos * fr[k] / (nf * nf));
                g_w[[j, k]] += coeff * (fr[k] / (nf * nw) - cos * wr[k] / (nw * nw));
            }
        }
    }
    (g_f, g_w)
}

/// Hard labels or soft rows from the labeller on an untouched weak view.
enum Targets {
    Hard(Vec<usize>),
    Soft(Array2<f64>),
}

fn batch_targets(
    labeller: &dyn PseudoLabeller,
    weak: &ImageBatch,
    soft: bool,
) -> Result<Targets, TuneError> {
    let probs = labeller.label_probs(weak)?;
    if soft {
        Ok(Targets::Soft(probs.probs))
    } else {
        Ok(Targets::Hard(probs.argmax_labels()))
    }
}

/// One optimization step's loss and gradients on a weak/strong pair.
fn step_loss_and_grads(
    bundle: &EncoderBundle,
    prompts: &PromptSet,
    weights: &Array2<f64>,
    labeller: &dyn PseudoLabeller,
    source: &ImageBatch,
    config: &PromptTuneConfig,
    aug_seed: u64,
) -> Result<(f64, Array2<f64>, Array2<f64>), TuneError> {
    let weak = weak_augment(source);
    let targets = batch_targets(labeller, &weak, config.soft_targets)?;
    let strong = strong_augment(source, &config.augment, aug_seed);
    let features = encode_image_prompted(bundle, &strong, prompts)?.vectors;
    let cache = cosine_forward(&features, weights, config.logit_scale);
    let (loss, g_logits) = match &targets {
        Targets::Hard(labels) => sce_with_grad(&cache.logits, labels, config.label_smoothing)?,
        Targets::Soft(rows) => sce_soft_with_grad(&cache.logits, rows, config.label_smoothing)?,
    };
    let (g_f, g_w) = cosine_backward(&cache, &features, weights, &g_logits);
    let g_p = bundle.vision.prompt_vjp(&strong, prompts, &g_f)?;
    Ok((loss, g_p, g_w))
}

/// Train prompts and classifier against the labeller. Deterministic for a
/// fixed seed; the frozen encoder checksum is asserted unchanged.
pub fn tune_prompts(
    bundle: &EncoderBundle,
    init_classifier: &CDEClassifier,
    labeller: &dyn PseudoLabeller,
    manifest: &DatasetManifest,
    config: &PromptTuneConfig,
) -> Result<TunedModel, TuneError> {
    if !labeller.is_trained() {
        return Err(TuneError::UntrainedDL);
    }
    if init_classifier.dim() != bundle.d_vlm() {
        return Err(TuneError::DimMismatch {
            classifier: init_classifier.dim(),
            encoder: bundle.d_vlm(),
        });
    }
    if config.num_prompts == 0 {
        return Err(TuneError::InvalidPromptCount(0));
    }
    let frozen_before = bundle.frozen_checksum();

    let d_model = bundle.vision.d_model();
    let mut prompts = PromptSet::new_seeded(
        config.num_prompts,
        d_model,
        derive_seed(config.seed, 0x9701),
    );
    let mut classifier = init_classifier.clone();
    let batch_size = config
        .batch_size
        .min(manifest.split(Split::Train).len())
        .max(1);

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
    let mut prompt_state = AdamState::new(prompts.tokens.raw_dim());
    let mut classifier_state = AdamState::new(classifier.weights.raw_dim());

    let mut train_log = Vec::with_capacity(config.epochs);
    let mut best_loss = f64::INFINITY;
    let mut epochs_since_best = 0usize;
    let mut any_update = false;
    for epoch in 0..config.epochs {
        let start = std::time::Instant::now();
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        let epoch_seed = derive_seed(config.seed, 1000 + epoch as u64);
        for (bi, batch) in iterate_batches(manifest, Split::Train, batch_size, epoch_seed)?.enumerate()
        {
            let batch = batch?;
            let aug_seed = derive_seed(config.seed, 2_000_000 + (epoch as u64) * 4096 + bi as u64);
            let (loss, g_p, g_w) = step_loss_and_grads(
                bundle,
                &prompts,
                &classifier.weights,
                labeller,
                &batch,
                config,
                aug_seed,
            )?;
            if config.train_prompts {
                prompt_state.step(&mut prompts.tokens, &g_p, &opt_cfg);
                any_update = true;
            }
            if config.train_classifier {
                classifier_state.step(&mut classifier.weights, &g_w, &opt_cfg);
                any_update = true;
            }
            epoch_loss += loss;
            batches += 1.0;
        }
        let mean_loss = epoch_loss / batches.max(1.0);
        train_log.push(EpochLog {
            epoch,
            loss: mean_loss,
            test_top1: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if mean_loss + 1e-12 < best_loss {
            best_loss = mean_loss;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if let Some(patience) = config.patience {
                if epochs_since_best > patience {
                    break;
                }
            }
        }
    }

    if any_update && config.train_classifier {
        classifier.row_normalized = false;
    }
    debug_assert_eq!(bundle.frozen_checksum(), frozen_before);
    Ok(TunedModel {
        prompts,
        classifier,
        logit_scale: config.logit_scale,
        train_log,
    })
}

/// Top-1 accuracy of the tuned model on the test split; inference uses no
/// augmentation.
pub fn evaluate(
    model: &TunedModel,
    bundle: &EncoderBundle,
    manifest: &DatasetManifest,
) -> Result<Metrics, TuneError> {
    let mut truths = Vec::new();
    let mut predictions = Vec::new();
    for batch in iterate_batches(manifest, Split::Test, 64, 0)? {
        let batch = batch?;
        let features = encode_image_prompted(bundle, &batch, &model.prompts)?;
        let probs = predict(&model.classifier, &features, model.logit_scale)?;
        for (id, pred) in batch.ids.iter().zip(probs.argmax_labels()) {
            let record = manifest
                .record_by_id(Split::Test, id)
                .expect("batch ids come from the manifest");
            let truth = manifest
                .eval_label(record)
                .ok_or_else(|| TuneError::Data(DataError::UnknownRecord(id.clone())))?;
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

/// Write the per-epoch training log as CSV: epoch, loss, test_top1,
/// wall_seconds.
pub fn write_train_log(log: &[EpochLog], path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss,test_top1,wall_seconds")?;
    for e in log {
        writeln!(
            f,
            "{},{},{},{}",
            e.epoch,
            e.loss,
            e.test_top1.map(|v| v.to_string()).unwrap_or_default(),
            e.wall_seconds
        )?;
    }
    Ok(())
}
