//! Label-free adaptation of a frozen vision-language classifier.
//!
//! The pipeline has three stages: (a) build a class-embedding classifier by
//! averaging text embeddings of LLM-generated class descriptions, (b) select
//! the top-k most confident zero-shot pseudo-labels per class and train a
//! lightweight alignment head on frozen SSL features, and (c) use that
//! aligned network as an auto-labeller to tune visual prompt tokens and the
//! classifier on weak/strong view pairs, with every encoder kept frozen
//! throughout.

pub mod augment;
pub mod cde;
pub mod data;
pub mod dl;
pub mod encoders;
pub mod optim;
pub mod pipeline;
pub mod pseudo;
pub mod synthetic;
pub mod tune;
pub mod util;

pub use augment::{strong_augment, weak_augment, AugmentationPipeline};
pub use cde::{build_cde, predict, zero_shot_eval, CDEClassifier, Metrics, ProbabilityBatch};
pub use data::{
    generate_descriptions, iterate_batches, load_descriptions, load_manifest, DataError,
    DatasetManifest, DescriptionSet, ImageBatch, ImageRecord, Split,
};
pub use dl::{dl_predict, smoothed_cross_entropy, train_alignment, AlignTrainConfig, DLNetwork};
pub use encoders::{
    encode_image, encode_image_prompted, encode_ssl, encode_text, make_toy_encoders,
    EmbeddingBatch, EncoderBundle, EncoderError, PromptSet, ToyEncoderConfig,
};
pub use pipeline::{run_pipeline, ExperimentConfig, MetricsReport};
pub use pseudo::{compute_k, select_topk, PseudoLabelSet, SelectionPolicy};
pub use tune::{evaluate, tune_prompts, PromptTuneConfig, TunedModel};
