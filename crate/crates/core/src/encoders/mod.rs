//! Encoder abstraction: text encoder, vision encoder (optionally prompted),
//! and SSL feature encoder behind one frozen-parameter interface.
//!
//! Real pretrained backbones and the deterministic toy encoders implement the
//! same traits; nothing downstream branches on which one is plugged in.

mod toy;

pub use toy::{make_toy_encoders, ToyEncoderConfig, ToySslEncoder, ToyTextEncoder, ToyVisionEncoder};

use ndarray::Array2;
use thiserror::Error;

use crate::data::ImageBatch;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("prompt width mismatch: encoder d_model {encoder}, prompts {prompts}")]
    WidthMismatch { encoder: usize, prompts: usize },
    #[error("no pretrained-backbone adapter is bundled for checkpoint {0}")]
    UnsupportedBackbone(String),
}

/// A batch of embedding vectors, one per row.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub vectors: Array2<f64>,
    /// True when every row is L2-normalized (within 1e-5).
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Learnable visual prompt tokens, prepended to the vision encoder's input
/// sequence after the class token. The only trainable vision-side state.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub tokens: Array2<f64>,
}

impl PromptSet {
    /// Seeded fan-based uniform init in [-r, r] with r = sqrt(6 / (d_model + v)).
    pub fn new_seeded(v: usize, d_model: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let r = (6.0 / (d_model + v) as f64).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens = Array2::from_shape_fn((v, d_model), |_| rng.random_range(-r..=r));
        PromptSet { tokens }
    }

    /// Zero prompts; `encode_image_prompted` with an empty set reduces to
    /// `encode_image` bit-for-bit.
    pub fn empty(d_model: usize) -> Self {
        PromptSet {
            tokens: Array2::zeros((0, d_model)),
        }
    }

    pub fn count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Frozen text encoder.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    /// Encode to L2-normalized rows, one per text. Over-length texts are
    /// truncated and counted in `truncation_warnings`.
    fn encode(&self, texts: &[String]) -> Result<EmbeddingBatch, EncoderError>;
    fn truncation_warnings(&self) -> u64;
    fn param_checksum(&self) -> u64;
}

/// Frozen vision encoder with optional prompt tokens.
pub trait VisionEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn d_model(&self) -> usize;
    /// Number of patch tokens for this encoder's input geometry.
    fn patch_count(&self) -> usize;
    /// Input token sequence length when `v` prompts are prepended.
    fn sequence_length(&self, v: usize) -> usize {
        1 + v + self.patch_count()
    }
    fn encode(&self, batch: &ImageBatch) -> Result<EmbeddingBatch, EncoderError>;
    fn encode_prompted(
        &self,
        batch: &ImageBatch,
        prompts: &PromptSet,
    ) -> Result<EmbeddingBatch, EncoderError>;
    /// Vector-Jacobian product of the prompted forward pass with respect to
    /// the prompt tokens only: given dL/d(features) per row, returns
    /// dL/d(prompts) of shape [V, d_model]. Encoder parameters stay frozen
    /// and receive no gradient by construction.
    fn prompt_vjp(
        &self,
        batch: &ImageBatch,
        prompts: &PromptSet,
        grad_features: &Array2<f64>,
    ) -> Result<Array2<f64>, EncoderError>;
    fn param_checksum(&self) -> u64;
}

/// Frozen self-supervised feature encoder. Outputs are raw (unnormalized);
/// the alignment head consumes them as-is.
pub trait SslEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, batch: &ImageBatch) -> Result<EmbeddingBatch, EncoderError>;
    fn param_checksum(&self) -> u64;
}

/// The frozen encoder stack used by every pipeline stage.
#[derive(Clone)]
pub struct EncoderBundle {
    pub text: std::sync::Arc<dyn TextEncoder>,
    pub vision: std::sync::Arc<dyn VisionEncoder>,
    pub ssl: std::sync::Arc<dyn SslEncoder>,
}

impl EncoderBundle {
    pub fn d_vlm(&self) -> usize {
        self.vision.dim()
    }

    pub fn d_ssl(&self) -> usize {
        self.ssl.dim()
    }

    /// Combined checksum over all frozen parameters; unchanged across the
    /// entire pipeline by contract.
    pub fn frozen_checksum(&self) -> u64 {
        crate::util::combine_checksums(&[
            self.text.param_checksum(),
            self.vision.param_checksum(),
            self.ssl.param_checksum(),
        ])
    }
}

pub fn encode_text(bundle: &EncoderBundle, texts: &[String]) -> Result<EmbeddingBatch, EncoderError> {
    bundle.text.encode(texts)
}

pub fn encode_image(bundle: &EncoderBundle, batch: &ImageBatch) -> Result<EmbeddingBatch, EncoderError> {
    bundle.vision.encode(batch)
}

pub fn encode_image_prompted(
    bundle: &EncoderBundle,
    batch: &ImageBatch,
    prompts: &PromptSet,
) -> Result<EmbeddingBatch, EncoderError> {
    bundle.vision.encode_prompted(batch, prompts)
}

pub fn encode_ssl(bundle: &EncoderBundle, batch: &ImageBatch) -> Result<EmbeddingBatch, EncoderError> {
    bundle.ssl.encode(batch)
}
