//! Experiment orchestration: configuration, the three-stage driver with
//! per-stage checkpoints and resume, metrics reporting, and embedding
//! export.

mod checkpoint;
mod export;

pub use checkpoint::{
    load_cde, load_container, load_head, load_tuned, save_cde, save_container, save_head,
    save_tuned, CheckpointError, CHECKPOINT_VERSION,
};
pub use export::{export_embeddings, EmbeddingDump, EmbeddingSource};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::cde::{build_cde, predict, zero_shot_eval, CDEClassifier, Metrics, ProbabilityBatch};
use crate::data::{iterate_batches, load_descriptions, load_manifest, DatasetManifest, Split};
use crate::dl::{dl_eval, train_alignment, AlignTrainConfig, DLNetwork, FeatureSource, HeadArch};
use crate::encoders::{encode_image, make_toy_encoders, EncoderBundle, EncoderError, ToyEncoderConfig};
use crate::optim::OptimizerKind;
use crate::pseudo::{compute_k, load_pseudo_labels, save_pseudo_labels, select_topk, SelectionPolicy};
use crate::tune::{evaluate, tune_prompts, write_train_log, CdeLabeller, PromptTuneConfig, PseudoLabeller, TunedModel};

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(
    stage: &'static str,
) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub align: u64,
    pub tune: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabellerChoice {
    Dl,
    Cde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub pseudo_labeller: LabellerChoice,
    pub dl_features: FeatureSource,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            pseudo_labeller: LabellerChoice::Dl,
            dl_features: FeatureSource::Ssl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptionsConfig {
    pub cache: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodersConfig {
    pub toy: ToyEncoderConfig,
    pub seed: u64,
    /// Paths to pretrained backbone checkpoints. Absent paths select the
    /// toy encoders.
    pub vlm_checkpoint: Option<PathBuf>,
    pub ssl_checkpoint: Option<PathBuf>,
}

impl Default for EncodersConfig {
    fn default() -> Self {
        EncodersConfig {
            toy: ToyEncoderConfig::default(),
            seed: 0,
            vlm_checkpoint: None,
            ssl_checkpoint: None,
        }
    }
}

impl EncodersConfig {
    pub fn build(&self) -> Result<EncoderBundle, EncoderError> {
        if let Some(path) = self.vlm_checkpoint.as_ref().or(self.ssl_checkpoint.as_ref()) {
            // No pretrained-backbone adapter ships with this crate; the
            // config surface exists so one can be plugged in behind the
            // same traits.
            return Err(EncoderError::UnsupportedBackbone(
                path.display().to_string(),
            ));
        }
        Ok(make_toy_encoders(&self.toy, self.seed))
    }
}

/// Per-stage training settings as stored in the config file; seeds come
/// from [`Seeds`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub arch: HeadArch,
}

impl Default for AlignSection {
    fn default() -> Self {
        let d = AlignTrainConfig::default();
        AlignSection {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            label_smoothing: d.label_smoothing,
            optimizer: d.optimizer,
            weight_decay: d.weight_decay,
            arch: d.arch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneSection {
    pub num_prompts: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub train_prompts: bool,
    pub train_classifier: bool,
    pub soft_targets: bool,
    pub patience: Option<usize>,
    pub augment: crate::augment::AugmentationPipeline,
}

impl Default for TuneSection {
    fn default() -> Self {
        let d = PromptTuneConfig::preset_main();
        TuneSection {
            num_prompts: d.num_prompts,
            lr: d.lr,
            batch_size: d.batch_size,
            epochs: d.epochs,
            optimizer: d.optimizer,
            weight_decay: d.weight_decay,
            label_smoothing: d.label_smoothing,
            train_prompts: d.train_prompts,
            train_classifier: d.train_classifier,
            soft_targets: d.soft_targets,
            patience: d.patience,
            augment: d.augment,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub descriptions: DescriptionsConfig,
    #[serde(default)]
    pub encoders: EncodersConfig,
    #[serde(default)]
    pub selection: SelectionPolicy,
    #[serde(default)]
    pub align: AlignSection,
    #[serde(default)]
    pub tune: TuneSection,
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_logit_scale() -> f64 {
    100.0
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Parse and validate; relative dataset paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if config.dataset.manifest.is_relative() {
            config.dataset.manifest = base.join(&config.dataset.manifest);
        }
        if config.descriptions.cache.is_relative() {
            config.descriptions.cache = base.join(&config.descriptions.cache);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.dataset.manifest.exists() {
            return Err(ConfigError::MissingPath(self.dataset.manifest.clone()));
        }
        if !self.descriptions.cache.exists() {
            return Err(ConfigError::MissingPath(self.descriptions.cache.clone()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn align_config(&self) -> AlignTrainConfig {
        AlignTrainConfig {
            epochs: self.align.epochs,
            lr: self.align.lr,
            batch_size: self.align.batch_size,
            label_smoothing: self.align.label_smoothing,
            optimizer: self.align.optimizer,
            weight_decay: self.align.weight_decay,
            arch: self.align.arch,
            feature_source: self.ablation.dl_features,
            seed: self.seeds.align,
        }
    }

    pub fn tune_config(&self) -> PromptTuneConfig {
        PromptTuneConfig {
            num_prompts: self.tune.num_prompts,
            lr: self.tune.lr,
            batch_size: self.tune.batch_size,
            epochs: self.tune.epochs,
            optimizer: self.tune.optimizer,
            weight_decay: self.tune.weight_decay,
            label_smoothing: self.tune.label_smoothing,
            logit_scale: self.logit_scale,
            seed: self.seeds.tune,
            train_prompts: self.tune.train_prompts,
            train_classifier: self.tune.train_classifier,
            soft_targets: self.tune.soft_targets,
            patience: self.tune.patience,
            augment: self.tune.augment.clone(),
        }
    }
}

/// Stage keys used in the report, matching the stage decomposition.
pub const STAGE_ZERO_SHOT: &str = "zero_shot_cde";
pub const STAGE_DL: &str = "dl_network";
pub const STAGE_FINAL: &str = "nola_final";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage_accuracies: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, Vec<crate::cde::ClassMetric>>,
    pub timings_seconds: BTreeMap<String, f64>,
    pub config_snapshot: String,
    pub version: String,
    pub seeds: Seeds,
}

impl MetricsReport {
    pub fn print_table(&self) {
        println!("stage               top-1");
        println!("------------------  ------");
        for key in [STAGE_ZERO_SHOT, STAGE_DL, STAGE_FINAL] {
            if let Some(acc) = self.stage_accuracies.get(key) {
                println!("{key:<18}  {:.4}", acc);
            }
        }
        for (stage, secs) in &self.timings_seconds {
            println!("[{stage}] {secs:.2}s");
        }
    }
}

/// Mean stage accuracies over several runs (the multi-dataset averaging
/// convention); only keys present in every report are averaged.
pub fn average_stage_accuracies(reports: &[MetricsReport]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if reports.is_empty() {
        return out;
    }
    for key in reports[0].stage_accuracies.keys() {
        if reports.iter().all(|r| r.stage_accuracies.contains_key(key)) {
            let mean = reports
                .iter()
                .map(|r| r.stage_accuracies[key])
                .sum::<f64>()
                / reports.len() as f64;
            out.insert(key.clone(), mean);
        }
    }
    out
}

/// Holds the run lock inside the output directory; removed on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock, PipelineError> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError {
                stage: "lock",
                source: format!("output dir is locked by another run: {}", path.display()).into(),
            }),
            Err(e) => Err(stage_err("lock")(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Zero-shot probabilities over the train split, for pseudo-label
/// selection. Reads no ground-truth labels.
pub fn train_split_probs(
    classifier: &CDEClassifier,
    bundle: &EncoderBundle,
    manifest: &DatasetManifest,
    logit_scale: f64,
) -> Result<(ProbabilityBatch, Vec<String>), crate::cde::CdeError> {
    let mut ids = Vec::new();
    let mut rows: Vec<ndarray::Array1<f64>> = Vec::new();
    for batch in iterate_batches(manifest, Split::Train, 64, 0)? {
        let batch = batch?;
        let features = encode_image(bundle, &batch)?;
        let probs = predict(classifier, &features, logit_scale)?;
        for (i, id) in batch.ids.iter().enumerate() {
            ids.push(id.clone());
            rows.push(probs.probs.row(i).to_owned());
        }
    }
    let c = classifier.num_classes();
    let mut probs = ndarray::Array2::zeros((ids.len(), c));
    for (i, r) in rows.iter().enumerate() {
        probs.row_mut(i).assign(r);
    }
    let logits = probs.mapv(|p: f64| p.max(1e-300).ln());
    Ok((
        ProbabilityBatch {
            probs,
            logits,
            logit_scale,
        },
        ids,
    ))
}

pub struct PipelineArtifacts {
    pub report: MetricsReport,
    pub tuned: TunedModel,
}

/// Run the three stages in order, checkpointing each artifact under the
/// output directory. With `resume` set, stages whose checkpoints exist are
/// loaded instead of recomputed; a fresh run and an interrupted-then-resumed
/// run produce the same report.
pub fn run_pipeline(config: &ExperimentConfig, resume: bool) -> Result<MetricsReport, PipelineError> {
    Ok(run_pipeline_full(config, resume)?.report)
}

pub fn run_pipeline_full(
    config: &ExperimentConfig,
    resume: bool,
) -> Result<PipelineArtifacts, PipelineError> {
    config.validate().map_err(stage_err("config"))?;
    std::fs::create_dir_all(&config.output_dir).map_err(stage_err("config"))?;
    let _lock = RunLock::acquire(&config.output_dir)?;

    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut stage_accuracies = BTreeMap::new();
    let mut per_class = BTreeMap::new();
    let clock = std::time::Instant::now();
    let mut last_mark = 0.0;
    let mut mark = |timings: &mut BTreeMap<String, f64>, stage: &str| {
        let now = clock.elapsed().as_secs_f64();
        timings.insert(stage.to_string(), now - last_mark);
        last_mark = now;
    };

    // Inputs.
    let manifest = load_manifest(&config.dataset.manifest).map_err(stage_err("load_manifest"))?;
    let descriptions = load_descriptions(&config.descriptions.cache, &manifest)
        .map_err(stage_err("load_descriptions"))?;
    let bundle = config.encoders.build().map_err(stage_err("encoders"))?;
    let frozen_before = bundle.frozen_checksum();
    mark(&mut timings, "load");

    // Stage (a): class-description embedding classifier.
    let cde_path = config.output_dir.join("cde.json");
    let cde = if resume && cde_path.exists() {
        load_cde(&cde_path).map_err(stage_err("build_cde"))?
    } else {
        let cde = build_cde(&descriptions, &bundle).map_err(stage_err("build_cde"))?;
        save_cde(&cde_path, &manifest.name, &cde).map_err(stage_err("build_cde"))?;
        cde
    };
    mark(&mut timings, "build_cde");

    let zs_metrics = zero_shot_eval(&cde, &bundle, &manifest, Split::Test, config.logit_scale)
        .map_err(stage_err("zero_shot_eval"))?;
    stage_accuracies.insert(STAGE_ZERO_SHOT.to_string(), zs_metrics.top1);
    per_class.insert(STAGE_ZERO_SHOT.to_string(), zs_metrics.per_class.clone());
    mark(&mut timings, "zero_shot_eval");

    // Stage (b): confident pseudo-labels, then the labelling network.
    let pseudo_path = config.output_dir.join("pseudo.jsonl");
    let pseudo = if resume && pseudo_path.exists() {
        load_pseudo_labels(&pseudo_path, manifest.num_classes())
            .map_err(stage_err("select_topk"))?
    } else {
        let (probs, ids) = train_split_probs(&cde, &bundle, &manifest, config.logit_scale)
            .map_err(stage_err("select_topk"))?;
        let k = compute_k(ids.len(), manifest.num_classes(), &config.selection)
            .map_err(stage_err("compute_k"))?;
        let pseudo =
            select_topk(&probs, &ids, k, &config.selection).map_err(stage_err("select_topk"))?;
        save_pseudo_labels(&pseudo, &pseudo_path).map_err(stage_err("select_topk"))?;
        pseudo
    };
    mark(&mut timings, "select_topk");

    let dl: Option<DLNetwork> = match config.ablation.pseudo_labeller {
        LabellerChoice::Cde => None,
        LabellerChoice::Dl => {
            let head_path = config.output_dir.join("head.json");
            let align_config = config.align_config();
            let dl = if resume && head_path.exists() {
                let (head, train_loss) = load_head(&head_path).map_err(stage_err("train_alignment"))?;
                DLNetwork {
                    bundle: bundle.clone(),
                    feature_source: align_config.feature_source,
                    head,
                    train_loss,
                }
            } else {
                let dl = train_alignment(&bundle, &pseudo, &manifest, &align_config)
                    .map_err(stage_err("train_alignment"))?;
                save_head(
                    &head_path,
                    &manifest.name,
                    &dl.head,
                    &dl.train_loss,
                    align_config.epochs,
                    align_config.lr,
                    align_config.label_smoothing,
                    align_config.seed,
                )
                .map_err(stage_err("train_alignment"))?;
                dl
            };
            let dl_metrics = dl_eval(&dl, &manifest, Split::Test).map_err(stage_err("dl_eval"))?;
            stage_accuracies.insert(STAGE_DL.to_string(), dl_metrics.top1);
            per_class.insert(STAGE_DL.to_string(), dl_metrics.per_class.clone());
            Some(dl)
        }
    };
    mark(&mut timings, "dl_network");

    // Stage (c): prompt tuning against the labeller.
    let tuned_path = config.output_dir.join("tuned.json");
    let tune_config = config.tune_config();
    let tuned = if resume && tuned_path.exists() {
        load_tuned(&tuned_path).map_err(stage_err("tune_prompts"))?
    } else {
        let tuned = match &dl {
            Some(dl) => tune_prompts(&bundle, &cde, dl, &manifest, &tune_config)
                .map_err(stage_err("tune_prompts"))?,
            None => {
                let labeller = CdeLabeller {
                    bundle: bundle.clone(),
                    classifier: cde.clone(),
                    logit_scale: config.logit_scale,
                };
                tune_prompts(&bundle, &cde, &labeller as &dyn PseudoLabeller, &manifest, &tune_config)
                    .map_err(stage_err("tune_prompts"))?
            }
        };
        save_tuned(&tuned_path, &manifest.name, &tuned, &config.tune, config.seeds.tune)
            .map_err(stage_err("tune_prompts"))?;
        write_train_log(&tuned.train_log, &config.output_dir.join("train_log.csv"))
            .map_err(stage_err("tune_prompts"))?;
        tuned
    };
    mark(&mut timings, "tune_prompts");

    let final_metrics = evaluate(&tuned, &bundle, &manifest).map_err(stage_err("evaluate"))?;
    stage_accuracies.insert(STAGE_FINAL.to_string(), final_metrics.top1);
    per_class.insert(STAGE_FINAL.to_string(), final_metrics.per_class.clone());
    mark(&mut timings, "evaluate");

    if bundle.frozen_checksum() != frozen_before {
        return Err(PipelineError {
            stage: "frozen_contract",
            source: "encoder parameters changed during the run".into(),
        });
    }

    let report = MetricsReport {
        stage_accuracies,
        per_class,
        timings_seconds: timings,
        config_snapshot: config.to_toml_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: config.seeds.clone(),
    };
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(config.output_dir.join("report.json"), report_json)
        .map_err(stage_err("report"))?;
    std::fs::write(
        config.output_dir.join("config.toml"),
        config.to_toml_string(),
    )
    .map_err(stage_err("report"))?;
    Ok(PipelineArtifacts { report, tuned })
}

/// Evaluate a previously tuned checkpoint directory on its test split.
pub fn eval_checkpoint(dir: &Path) -> Result<Metrics, PipelineError> {
    let config = ExperimentConfig::load(&dir.join("config.toml")).map_err(stage_err("config"))?;
    let manifest = load_manifest(&config.dataset.manifest).map_err(stage_err("load_manifest"))?;
    let bundle = config.encoders.build().map_err(stage_err("encoders"))?;
    let tuned = load_tuned(&dir.join("tuned.json")).map_err(stage_err("evaluate"))?;
    evaluate(&tuned, &bundle, &manifest).map_err(stage_err("evaluate"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        std::fs::write(dir.path().join("desc.json"), "{}").unwrap();
        let config = ExperimentConfig {
            dataset: DatasetConfig {
                manifest: dir.path().join("manifest.json"),
            },
            descriptions: DescriptionsConfig {
                cache: dir.path().join("desc.json"),
            },
            encoders: EncodersConfig::default(),
            selection: SelectionPolicy::default(),
            align: AlignSection::default(),
            tune: TuneSection::default(),
            logit_scale: 100.0,
            output_dir: dir.path().join("out"),
            seeds: Seeds {
                data: 1,
                align: 2,
                tune: 3,
            },
            ablation: AblationConfig::default(),
        };
        let text = config.to_toml_string();
        let parsed = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(parsed.seeds.align, 2);
        assert_eq!(parsed.tune.num_prompts, 16);
        assert_eq!(parsed.selection.floor, 16);
        assert_eq!(parsed.ablation.pseudo_labeller, LabellerChoice::Dl);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let text = r#"
            output_dir = "out"
            [dataset]
            manifest = "m.json"
            [descriptions]
            cache = "d.json"
            [seeds]
            data = 0
            align = 0
            tune = 0
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(config.logit_scale, 100.0);
        assert_eq!(config.align.epochs, 50);
        assert_eq!(config.align.lr, 1e-3);
        assert_eq!(config.tune.batch_size, 512);
        assert_eq!(config.selection.fraction, 0.2);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let text = r#"
            output_dir = "out"
            [dataset]
            manifest = "/nonexistent/m.json"
            [descriptions]
            cache = "/nonexistent/d.json"
            [seeds]
            data = 0
            align = 0
            tune = 0
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert!(matches!(
            config.validate(),
            Err(ConfigError::MissingPath(_))
        ));
    }

    #[test]
    fn checkpoint_config_rejects_unbundled_backbones() {
        let encoders = EncodersConfig {
            vlm_checkpoint: Some(PathBuf::from("weights.bin")),
            ..Default::default()
        };
        assert!(matches!(
            encoders.build(),
            Err(EncoderError::UnsupportedBackbone(_))
        ));
    }

    #[test]
    fn average_requires_common_keys() {
        let mk = |zs: f64, fin: Option<f64>| {
            let mut acc = BTreeMap::new();
            acc.insert(STAGE_ZERO_SHOT.to_string(), zs);
            if let Some(f) = fin {
                acc.insert(STAGE_FINAL.to_string(), f);
            }
            MetricsReport {
                stage_accuracies: acc,
                per_class: BTreeMap::new(),
                timings_seconds: BTreeMap::new(),
                config_snapshot: String::new(),
                version: "test".into(),
                seeds: Seeds {
                    data: 0,
                    align: 0,
                    tune: 0,
                },
            }
        };
        let avg = average_stage_accuracies(&[mk(0.5, Some(0.9)), mk(0.7, None)]);
        assert!((avg[STAGE_ZERO_SHOT] - 0.6).abs() < 1e-12);
        assert!(!avg.contains_key(STAGE_FINAL));
    }
}
