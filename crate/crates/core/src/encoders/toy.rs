//! Deterministic toy encoders for desk-scale verification.
//!
//! The text encoder hashes tokens into a signed histogram and applies a
//! fixed seeded projection. The vision encoder lifts per-patch channel
//! means into model width, runs one attention-pooling layer over
//! `[CLS, prompts, patches]`, and projects the pooled vector into the
//! joint space. The SSL encoder projects finer patches without pooling
//! them away, so sub-patch structure that the vision encoder's patch
//! means cancel out remains visible to it.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{EmbeddingBatch, EncoderBundle, EncoderError, PromptSet, SslEncoder, TextEncoder, VisionEncoder};
use crate::data::ImageBatch;
use crate::util::{combine_checksums, derive_seed, fnv1a64, splitmix64, tensor_checksum};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub input_size: usize,
    pub channels: usize,
    pub d_vlm: usize,
    pub d_ssl: usize,
    pub d_model: usize,
    /// Vision-encoder patch edge; patches are reduced to channel means.
    pub vlm_patch: usize,
    /// SSL-encoder patch edge; patches are flattened, not averaged.
    pub ssl_patch: usize,
    pub ssl_patch_dim: usize,
    pub text_hash_dim: usize,
    pub context_len: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            input_size: 32,
            channels: 1,
            d_vlm: 32,
            d_ssl: 48,
            d_model: 16,
            vlm_patch: 8,
            ssl_patch: 4,
            ssl_patch_dim: 8,
            text_hash_dim: 128,
            context_len: 32,
        }
    }
}

fn seeded_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..=scale))
}

fn seeded_vector(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-scale..=scale))
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

pub struct ToyTextEncoder {
    w_proj: Array2<f64>,
    hash_dim: usize,
    context_len: usize,
    token_seed: u64,
    truncations: AtomicU64,
}

impl ToyTextEncoder {
    fn new(config: &ToyEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / config.text_hash_dim as f64).sqrt();
        ToyTextEncoder {
            w_proj: seeded_matrix(config.d_vlm, config.text_hash_dim, scale, &mut rng),
            hash_dim: config.text_hash_dim,
            context_len: config.context_len,
            token_seed: splitmix64(seed ^ 0x7e57),
            truncations: AtomicU64::new(0),
        }
    }

    fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    /// Signed histogram of hashed tokens, averaged over the (possibly
    /// truncated) token sequence.
    fn hash_features(&self, text: &str) -> Array1<f64> {
        let mut tokens = Self::tokenize(text);
        if tokens.is_empty() {
            tokens.push(text.to_string());
        }
        if tokens.len() > self.context_len {
            tokens.truncate(self.context_len);
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        let mut hist = Array1::zeros(self.hash_dim);
        for tok in &tokens {
            let h = splitmix64(fnv1a64(tok.as_bytes()) ^ self.token_seed);
            let idx = (h % self.hash_dim as u64) as usize;
            let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
            hist[idx] += sign;
        }
        hist /= tokens.len() as f64;
        hist
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.w_proj.nrows()
    }

    fn encode(&self, texts: &[String]) -> Result<EmbeddingBatch, EncoderError> {
        if texts.is_empty() {
            return Err(EncoderError::EmptyInput("texts"));
        }
        let mut vectors = Array2::zeros((texts.len(), self.dim()));
        for (i, text) in texts.iter().enumerate() {
            let mut v = self.w_proj.dot(&self.hash_features(text));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                // Hash cancellation left a zero vector; fall back to a fixed
                // direction so the row stays unit-norm.
                v = Array1::zeros(self.dim());
                v[0] = 1.0;
            } else {
                v /= norm;
            }
            vectors.row_mut(i).assign(&v);
        }
        Ok(EmbeddingBatch {
            vectors,
            normalized: true,
        })
    }

    fn truncation_warnings(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    fn param_checksum(&self) -> u64 {
        combine_checksums(&[tensor_checksum(self.w_proj.iter()), self.token_seed])
    }
}

// ---------------------------------------------------------------------------
// Vision encoder
// ---------------------------------------------------------------------------

pub struct ToyVisionEncoder {
    input_size: usize,
    channels: usize,
    patch: usize,
    d_model: usize,
    d_vlm: usize,
    w_lift: Array2<f64>,
    b_patch: Array1<f64>,
    pos: Array2<f64>,
    cls: Array1<f64>,
    attn_query: Array1<f64>,
    w_value: Array2<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    inv_sqrt: f64,
}

/// Cached per-image forward state used by the prompt VJP.
struct AttnTrace {
    attn: Array1<f64>,
    values: Array2<f64>,
    feature: Array1<f64>,
    out_norm: f64,
}

impl ToyVisionEncoder {
    fn new(config: &ToyEncoderConfig, seed: u64) -> Self {
        assert!(
            config.input_size % config.vlm_patch == 0,
            "input size must be a multiple of the vision patch size"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = config.input_size / config.vlm_patch;
        let m = grid * grid;
        let d = config.d_model;
        ToyVisionEncoder {
            input_size: config.input_size,
            channels: config.channels,
            patch: config.vlm_patch,
            d_model: d,
            d_vlm: config.d_vlm,
            w_lift: seeded_matrix(d, config.channels, 1.5, &mut rng),
            b_patch: seeded_vector(d, 0.3, &mut rng),
            pos: seeded_matrix(m, d, 0.3, &mut rng),
            cls: seeded_vector(d, 0.5, &mut rng),
            attn_query: seeded_vector(d, (1.0 / d as f64).sqrt() * 1.5, &mut rng),
            w_value: seeded_matrix(d, d, (3.0 / d as f64).sqrt(), &mut rng),
            w_out: seeded_matrix(config.d_vlm, d, (3.0 / d as f64).sqrt(), &mut rng),
            b_out: seeded_vector(config.d_vlm, 0.1, &mut rng),
            inv_sqrt: 1.0 / (d as f64).sqrt(),
        }
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<(), EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyInput("image batch"));
        }
        let shape = batch.pixels.shape();
        if shape[1] != self.input_size || shape[2] != self.input_size || shape[3] != self.channels {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("{0}x{0}x{1}", self.input_size, self.channels),
                got: format!("{}x{}x{}", shape[1], shape[2], shape[3]),
            });
        }
        Ok(())
    }

    /// Patch tokens for one image: per-patch channel means, centered from
    /// [0, 1] to [-1, 1] (the adapter's input normalization), lifted to
    /// model width, plus position embedding. Sub-patch detail cancels here
    /// by design; the SSL encoder is the one that keeps it.
    fn patch_tokens(&self, image: ndarray::ArrayView3<'_, f64>) -> Array2<f64> {
        let grid = self.input_size / self.patch;
        let m = grid * grid;
        let mut tokens = Array2::zeros((m, self.d_model));
        let area = (self.patch * self.patch) as f64;
        for gy in 0..grid {
            for gx in 0..grid {
                let mut mean = Array1::zeros(self.channels);
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        for c in 0..self.channels {
                            mean[c] += image[[gy * self.patch + py, gx * self.patch + px, c]];
                        }
                    }
                }
                mean.mapv_inplace(|v| 2.0 * (v / area - 0.5));
                let j = gy * grid + gx;
                let tok = self.w_lift.dot(&mean) + &self.b_patch + &self.pos.row(j);
                tokens.row_mut(j).assign(&tok);
            }
        }
        tokens
    }

    fn token_sequence(&self, image: ndarray::ArrayView3<'_, f64>, prompts: &PromptSet) -> Array2<f64> {
        let patches = self.patch_tokens(image);
        let v = prompts.count();
        let mut seq = Array2::zeros((1 + v + patches.nrows(), self.d_model));
        seq.row_mut(0).assign(&self.cls);
        for i in 0..v {
            seq.row_mut(1 + i).assign(&prompts.tokens.row(i));
        }
        for j in 0..patches.nrows() {
            seq.row_mut(1 + v + j).assign(&patches.row(j));
        }
        seq
    }

    fn forward_tokens(&self, seq: &Array2<f64>) -> AttnTrace {
        let t = seq.nrows();
        let mut scores = Array1::zeros(t);
        for j in 0..t {
            scores[j] = self.attn_query.dot(&seq.row(j)) * self.inv_sqrt;
        }
        let attn = crate::util::softmax(scores.view());
        let mut values = Array2::zeros((t, self.d_model));
        let mut pooled = Array1::zeros(self.d_model);
        for j in 0..t {
            let v = self.w_value.dot(&seq.row(j));
            pooled.scaled_add(attn[j], &v);
            values.row_mut(j).assign(&v);
        }
        let out = self.w_out.dot(&pooled) + &self.b_out;
        let out_norm = out.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        AttnTrace {
            attn,
            values,
            feature: out / out_norm,
            out_norm,
        }
    }

    /// Backward of [`Self::forward_tokens`] through the attention pooling:
    /// returns dL/d(token_j) for each sequence position given dL/d(feature).
    fn token_grads(&self, trace: &AttnTrace, grad_feature: ArrayView1<'_, f64>) -> Array2<f64> {
        let t = trace.attn.len();
        // Through the final normalization: g_y = (g - (g.f) f) / ||y||.
        let gf_dot_f = grad_feature.dot(&trace.feature);
        let mut g_out = Array1::zeros(self.d_vlm);
        for i in 0..self.d_vlm {
            g_out[i] = (grad_feature[i] - gf_dot_f * trace.feature[i]) / trace.out_norm;
        }
        let g_pooled = self.w_out.t().dot(&g_out);
        // Softmax coupling: g_score_j = a_j (alpha_j - sum_i a_i alpha_i)
        // with alpha_j = g_pooled . v_j.
        let alphas: Array1<f64> = (0..t).map(|j| g_pooled.dot(&trace.values.row(j))).collect();
        let mean_alpha: f64 = (0..t).map(|j| trace.attn[j] * alphas[j]).sum();
        let wv_t_gp = self.w_value.t().dot(&g_pooled);
        let mut grads = Array2::zeros((t, self.d_model));
        for j in 0..t {
            let g_score = trace.attn[j] * (alphas[j] - mean_alpha);
            let mut row = grads.row_mut(j);
            row.scaled_add(trace.attn[j], &wv_t_gp);
            row.scaled_add(g_score * self.inv_sqrt, &self.attn_query);
        }
        grads
    }
}

impl VisionEncoder for ToyVisionEncoder {
    fn dim(&self) -> usize {
        self.d_vlm
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn patch_count(&self) -> usize {
        let grid = self.input_size / self.patch;
        grid * grid
    }

    fn encode(&self, batch: &ImageBatch) -> Result<EmbeddingBatch, EncoderError> {
        self.encode_prompted(batch, &PromptSet::empty(self.d_model))
    }

    fn encode_prompted(
        &self,
        batch: &ImageBatch,
        prompts: &PromptSet,
    ) -> Result<EmbeddingBatch, EncoderError> {
        self.check_batch(batch)?;
        if prompts.count() > 0 && prompts.d_model() != self.d_model {
            return Err(EncoderError::WidthMismatch {
                encoder: self.d_model,
                prompts: prompts.d_model(),
            });
        }
        let mut vectors = Array2::zeros((batch.len(), self.d_vlm));
        for (i, image) in batch.pixels.axis_iter(Axis(0)).enumerate() {
            let seq = self.token_sequence(image, prompts);
            let trace = self.forward_tokens(&seq);
            vectors.row_mut(i).assign(&trace.feature);
        }
        Ok(EmbeddingBatch {
            vectors,
            normalized: true,
        })
    }

    fn prompt_vjp(
        &self,
        batch: &ImageBatch,
        prompts: &PromptSet,
        grad_features: &Array2<f64>,
    ) -> Result<Array2<f64>, EncoderError> {
        self.check_batch(batch)?;
        let v = prompts.count();
        if v > 0 && prompts.d_model() != self.d_model {
            return Err(EncoderError::WidthMismatch {
                encoder: self.d_model,
                prompts: prompts.d_model(),
            });
        }
        if grad_features.nrows() != batch.len() || grad_features.ncols() != self.d_vlm {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("{}x{}", batch.len(), self.d_vlm),
                got: format!("{}x{}", grad_features.nrows(), grad_features.ncols()),
            });
        }
        let mut grad = Array2::zeros((v, self.d_model));
        for (i, image) in batch.pixels.axis_iter(Axis(0)).enumerate() {
            let seq = self.token_sequence(image, prompts);
            let trace = self.forward_tokens(&seq);
            let token_grads = self.token_grads(&trace, grad_features.row(i));
            for p in 0..v {
                grad.row_mut(p).scaled_add(1.0, &token_grads.row(1 + p));
            }
        }
        Ok(grad)
    }

    fn param_checksum(&self) -> u64 {
        combine_checksums(&[
            tensor_checksum(self.w_lift.iter()),
            tensor_checksum(self.b_patch.iter()),
            tensor_checksum(self.pos.iter()),
            tensor_checksum(self.cls.iter()),
            tensor_checksum(self.attn_query.iter()),
            tensor_checksum(self.w_value.iter()),
            tensor_checksum(self.w_out.iter()),
            tensor_checksum(self.b_out.iter()),
        ])
    }
}

// ---------------------------------------------------------------------------
// SSL encoder
// ---------------------------------------------------------------------------

pub struct ToySslEncoder {
    input_size: usize,
    channels: usize,
    patch: usize,
    d_ssl: usize,
    w_patch: Array2<f64>,
    b_patch: Array1<f64>,
    w_mix: Array2<f64>,
    b_mix: Array1<f64>,
}

impl ToySslEncoder {
    fn new(config: &ToyEncoderConfig, seed: u64) -> Self {
        assert!(
            config.input_size % config.ssl_patch == 0,
            "input size must be a multiple of the SSL patch size"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = config.input_size / config.ssl_patch;
        let m = grid * grid;
        let patch_in = config.ssl_patch * config.ssl_patch * config.channels;
        ToySslEncoder {
            input_size: config.input_size,
            channels: config.channels,
            patch: config.ssl_patch,
            d_ssl: config.d_ssl,
            w_patch: seeded_matrix(
                config.ssl_patch_dim,
                patch_in,
                (3.0 / patch_in as f64).sqrt(),
                &mut rng,
            ),
            b_patch: seeded_vector(config.ssl_patch_dim, 0.1, &mut rng),
            w_mix: seeded_matrix(
                config.d_ssl,
                m * config.ssl_patch_dim,
                (3.0 / (m * config.ssl_patch_dim) as f64).sqrt(),
                &mut rng,
            ),
            b_mix: seeded_vector(config.d_ssl, 0.1, &mut rng),
        }
    }
}

impl SslEncoder for ToySslEncoder {
    fn dim(&self) -> usize {
        self.d_ssl
    }

    fn encode(&self, batch: &ImageBatch) -> Result<EmbeddingBatch, EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyInput("image batch"));
        }
        let shape = batch.pixels.shape();
        if shape[1] != self.input_size || shape[2] != self.input_size || shape[3] != self.channels {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("{0}x{0}x{1}", self.input_size, self.channels),
                got: format!("{}x{}x{}", shape[1], shape[2], shape[3]),
            });
        }
        let grid = self.input_size / self.patch;
        let m = grid * grid;
        let dim = self.w_patch.nrows();
        let patch_in = self.patch * self.patch * self.channels;
        let mut vectors = Array2::zeros((batch.len(), self.d_ssl));
        for (i, image) in batch.pixels.axis_iter(Axis(0)).enumerate() {
            let mut concat = Array1::zeros(m * dim);
            let mut flat = Array1::zeros(patch_in);
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut idx = 0;
                    for py in 0..self.patch {
                        for px in 0..self.patch {
                            for c in 0..self.channels {
                                // Input normalization: [0, 1] -> [-1, 1].
                                flat[idx] = 2.0
                                    * (image[[gy * self.patch + py, gx * self.patch + px, c]]
                                        - 0.5);
                                idx += 1;
                            }
                        }
                    }
                    let proj = self.w_patch.dot(&flat) + &self.b_patch;
                    let j = gy * grid + gx;
                    concat.slice_mut(ndarray::s![j * dim..(j + 1) * dim]).assign(&proj);
                }
            }
            let out = self.w_mix.dot(&concat) + &self.b_mix;
            vectors.row_mut(i).assign(&out);
        }
        Ok(EmbeddingBatch {
            vectors,
            normalized: false,
        })
    }

    fn param_checksum(&self) -> u64 {
        combine_checksums(&[
            tensor_checksum(self.w_patch.iter()),
            tensor_checksum(self.b_patch.iter()),
            tensor_checksum(self.w_mix.iter()),
            tensor_checksum(self.b_mix.iter()),
        ])
    }
}

/// Build the deterministic toy encoder stack. Same `(config, seed)` gives
/// bit-identical parameters; the VLM and SSL encoders draw from independent
/// derived seeds so their feature geometries differ.
pub fn make_toy_encoders(config: &ToyEncoderConfig, seed: u64) -> EncoderBundle {
    EncoderBundle {
        text: Arc::new(ToyTextEncoder::new(config, derive_seed(seed, 1))),
        vision: Arc::new(ToyVisionEncoder::new(config, derive_seed(seed, 2))),
        ssl: Arc::new(ToySslEncoder::new(config, derive_seed(seed, 3))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{encode_image, encode_image_prompted, encode_ssl, encode_text};
    use ndarray::Array4;

    fn batch_from(images: Vec<Array2<f64>>) -> ImageBatch {
        let h = images[0].nrows();
        let w = images[0].ncols();
        let mut pixels = Array4::zeros((images.len(), h, w, 1));
        for (b, img) in images.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    pixels[[b, y, x, 0]] = img[[y, x]];
                }
            }
        }
        ImageBatch {
            ids: (0..images.len()).map(|i| format!("img{i}")).collect(),
            pixels,
        }
    }

    fn noisy_image(size: usize, seed: u64, offset: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((size, size), |_| {
            (offset + rng.random_range(-0.2..=0.2)).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn same_seed_bit_identical_parameters() {
        let config = ToyEncoderConfig::default();
        let a = make_toy_encoders(&config, 11);
        let b = make_toy_encoders(&config, 11);
        assert_eq!(a.frozen_checksum(), b.frozen_checksum());
        let texts = vec!["a photo".to_string()];
        assert_eq!(
            encode_text(&a, &texts).unwrap().vectors,
            encode_text(&b, &texts).unwrap().vectors
        );
    }

    #[test]
    fn different_seeds_differ() {
        let config = ToyEncoderConfig::default();
        let a = make_toy_encoders(&config, 7);
        let b = make_toy_encoders(&config, 8);
        assert_ne!(a.frozen_checksum(), b.frozen_checksum());
        let batch = batch_from(vec![noisy_image(32, 1, 0.5)]);
        assert_ne!(
            encode_image(&a, &batch).unwrap().vectors,
            encode_image(&b, &batch).unwrap().vectors
        );
    }

    #[test]
    fn configured_widths_are_respected() {
        let config = ToyEncoderConfig {
            d_vlm: 32,
            d_ssl: 48,
            ..Default::default()
        };
        let bundle = make_toy_encoders(&config, 0);
        let batch = batch_from(vec![noisy_image(32, 2, 0.5)]);
        assert_eq!(encode_image(&bundle, &batch).unwrap().dim(), 32);
        assert_eq!(encode_ssl(&bundle, &batch).unwrap().dim(), 48);
    }

    #[test]
    fn ssl_width_768_config() {
        let config = ToyEncoderConfig {
            d_ssl: 768,
            ..Default::default()
        };
        let bundle = make_toy_encoders(&config, 0);
        let batch = batch_from(vec![noisy_image(32, 3, 0.5)]);
        assert_eq!(encode_ssl(&bundle, &batch).unwrap().dim(), 768);
    }

    #[test]
    fn text_encode_is_deterministic_and_normalized() {
        let bundle = make_toy_encoders(&ToyEncoderConfig::default(), 5);
        let out = encode_text(&bundle, &["a".to_string(), "a".to_string()]).unwrap();
        assert_eq!(out.vectors.row(0), out.vectors.row(1));
        for row in out.vectors.rows() {
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
        assert!(matches!(
            encode_text(&bundle, &[]),
            Err(EncoderError::EmptyInput(_))
        ));
    }

    #[test]
    fn hash_encoder_cosine_matches_independent_computation() {
        // Recompute the hash-projection embedding for "cat" and "dog" from
        // first principles and compare against the encoder output.
        let config = ToyEncoderConfig::default();
        let seed = 5;
        let enc = ToyTextEncoder::new(&config, derive_seed(seed, 1));
        let bundle = make_toy_encoders(&config, seed);
        let out = encode_text(&bundle, &["cat".to_string(), "dog".to_string()]).unwrap();

        let expect = |word: &str| -> Array1<f64> {
            let h = splitmix64(fnv1a64(word.as_bytes()) ^ enc.token_seed);
            let idx = (h % config.text_hash_dim as u64) as usize;
            let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
            let mut hist = Array1::zeros(config.text_hash_dim);
            hist[idx] = sign;
            let v = enc.w_proj.dot(&hist);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v / n
        };
        let cat = expect("cat");
        let dog = expect("dog");
        for i in 0..config.d_vlm {
            assert!((out.vectors[[0, i]] - cat[i]).abs() < 1e-12);
            assert!((out.vectors[[1, i]] - dog[i]).abs() < 1e-12);
        }
        let cos = cat.dot(&dog);
        assert!(cos < 1.0 - 1e-6, "distinct words should not be collinear");
    }

    #[test]
    fn over_length_text_is_truncated_with_warning() {
        let config = ToyEncoderConfig {
            context_len: 4,
            ..Default::default()
        };
        let bundle = make_toy_encoders(&config, 0);
        let long = vec!["one two three four five six".to_string()];
        let truncated = vec!["one two three four".to_string()];
        let a = encode_text(&bundle, &long).unwrap();
        let b = encode_text(&bundle, &truncated).unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(bundle.text.truncation_warnings(), 1);
    }

    #[test]
    fn duplicated_image_rows_identical_and_shapes_hold() {
        let bundle = make_toy_encoders(&ToyEncoderConfig::default(), 9);
        let img = noisy_image(32, 4, 0.5);
        let batch = batch_from(vec![img.clone(), img.clone(), noisy_image(32, 5, 0.4)]);
        let out = encode_image(&bundle, &batch).unwrap();
        assert_eq!(out.vectors.shape(), &[3, 32]);
        assert_eq!(out.vectors.row(0), out.vectors.row(1));
        let ssl = encode_ssl(&bundle, &batch).unwrap();
        assert_eq!(ssl.vectors.row(0), ssl.vectors.row(1));
    }

    #[test]
    fn wrong_input_size_is_shape_mismatch() {
        let bundle = make_toy_encoders(&ToyEncoderConfig::default(), 9);
        let batch = batch_from(vec![noisy_image(16, 4, 0.5)]);
        assert!(matches!(
            encode_image(&bundle, &batch),
            Err(EncoderError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            encode_ssl(&bundle, &batch),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_image_gives_bias_embedding() {
        // An all-zero image centers to -1 per patch mean, so every patch
        // token reduces to -w_lift + b_patch + pos_j; replicate that
        // forward pass independently.
        let config = ToyEncoderConfig::default();
        let enc = ToyVisionEncoder::new(&config, derive_seed(3, 2));
        let bundle = make_toy_encoders(&config, 3);
        let batch = batch_from(vec![Array2::zeros((32, 32))]);
        let out = encode_image(&bundle, &batch).unwrap();

        let m = enc.patch_count();
        let mut tokens = Array2::zeros((1 + m, config.d_model));
        tokens.row_mut(0).assign(&enc.cls);
        for j in 0..m {
            let tok = enc.w_lift.column(0).to_owned() * -1.0 + &enc.b_patch + &enc.pos.row(j);
            tokens.row_mut(1 + j).assign(&tok);
        }
        let mut scores = Vec::new();
        for j in 0..=m {
            scores.push(enc.attn_query.dot(&tokens.row(j)) / (config.d_model as f64).sqrt());
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut pooled = Array1::zeros(config.d_model);
        for j in 0..=m {
            pooled = pooled + enc.w_value.dot(&tokens.row(j)) * (exps[j] / denom);
        }
        let y = enc.w_out.dot(&pooled) + &enc.b_out;
        let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = y / n;
        for i in 0..config.d_vlm {
            assert!((out.vectors[[0, i]] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn prompted_with_zero_prompts_is_bit_identical_to_plain() {
        let bundle = make_toy_encoders(&ToyEncoderConfig::default(), 13);
        let batch = batch_from(vec![noisy_image(32, 6, 0.5), noisy_image(32, 7, 0.3)]);
        let plain = encode_image(&bundle, &batch).unwrap();
        let prompted = encode_image_prompted(
            &bundle,
            &batch,
            &PromptSet::empty(bundle.vision.d_model()),
        )
        .unwrap();
        assert_eq!(plain.vectors, prompted.vectors);
    }

    #[test]
    fn vitb32_shaped_sequence_length_is_66() {
        let config = ToyEncoderConfig {
            input_size: 224,
            vlm_patch: 32,
            ssl_patch: 16,
            channels: 3,
            ..Default::default()
        };
        let bundle = make_toy_encoders(&config, 0);
        assert_eq!(bundle.vision.patch_count(), 49);
        assert_eq!(bundle.vision.sequence_length(16), 66);
    }

    #[test]
    fn prompted_matches_reference_forward() {
        // Independent re-implementation of the prompted forward pass.
        let config = ToyEncoderConfig::default();
        let seed = 21;
        let enc = ToyVisionEncoder::new(&config, derive_seed(seed, 2));
        let bundle = make_toy_encoders(&config, seed);
        let prompts = PromptSet::new_seeded(4, config.d_model, 77);
        let img = noisy_image(32, 8, 0.5);
        let batch = batch_from(vec![img.clone()]);
        let out = encode_image_prompted(&bundle, &batch, &prompts).unwrap();

        let grid = 32 / config.vlm_patch;
        let m = grid * grid;
        let t = 1 + prompts.count() + m;
        let mut tokens = Array2::zeros((t, config.d_model));
        tokens.row_mut(0).assign(&enc.cls);
        for p in 0..prompts.count() {
            tokens.row_mut(1 + p).assign(&prompts.tokens.row(p));
        }
        for gy in 0..grid {
            for gx in 0..grid {
                let mut mean = 0.0;
                for py in 0..config.vlm_patch {
                    for px in 0..config.vlm_patch {
                        mean += img[[gy * config.vlm_patch + py, gx * config.vlm_patch + px]];
                    }
                }
                mean = 2.0 * (mean / (config.vlm_patch * config.vlm_patch) as f64 - 0.5);
                let j = gy * grid + gx;
                let tok = enc.w_lift.column(0).to_owned() * mean + &enc.b_patch + &enc.pos.row(j);
                tokens.row_mut(1 + prompts.count() + j).assign(&tok);
            }
        }
        let scores: Vec<f64> = (0..t)
            .map(|j| enc.attn_query.dot(&tokens.row(j)) / (config.d_model as f64).sqrt())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut pooled = Array1::zeros(config.d_model);
        for j in 0..t {
            pooled = pooled + enc.w_value.dot(&tokens.row(j)) * (exps[j] / denom);
        }
        let y = enc.w_out.dot(&pooled) + &enc.b_out;
        let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = y / n;
        for i in 0..config.d_vlm {
            assert!((out.vectors[[0, i]] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_width_mismatch_is_rejected() {
        let bundle = make_toy_encoders(&ToyEncoderConfig::default(), 1);
        let prompts = PromptSet::new_seeded(2, 7, 0);
        let batch = batch_from(vec![noisy_image(32, 9, 0.5)]);
        assert!(matches!(
            encode_image_prompted(&bundle, &batch, &prompts),
            Err(EncoderError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let config = ToyEncoderConfig {
            input_size: 16,
            vlm_patch: 8,
            ssl_patch: 4,
            d_model: 12,
            d_vlm: 10,
            ..Default::default()
        };
        let bundle = make_toy_encoders(&config, 31);
        let batch = batch_from(vec![noisy_image(16, 10, 0.5), noisy_image(16, 11, 0.4)]);
        let prompts = PromptSet::new_seeded(3, config.d_model, 55);

        // Linear probe loss L = sum_ij c_ij f_ij exercises the full Jacobian.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c = Array2::from_shape_fn((batch.len(), config.d_vlm), |_| {
            rng.random_range(-1.0..=1.0)
        });
        let loss = |p: &PromptSet| -> f64 {
            let f = encode_image_prompted(&bundle, &batch, p).unwrap().vectors;
            (&f * &c).sum()
        };
        let analytic = bundle.vision.prompt_vjp(&batch, &prompts, &c).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..prompts.count() {
            for j in 0..config.d_model {
                let mut plus = prompts.clone();
                plus.tokens[[i, j]] += h;
                let mut minus = prompts.clone();
                minus.tokens[[i, j]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic[[i, j]].abs()).max(1e-8);
                max_rel = max_rel.max((analytic[[i, j]] - fd).abs() / denom);
            }
        }
        assert!(max_rel < 1e-3, "max relative gradient error {max_rel}");
    }

    #[test]
    fn encode_calls_leave_parameters_frozen() {
        let bundle = make_toy_encoders(&ToyEncoderConfig::default(), 17);
        let before = bundle.frozen_checksum();
        let batch = batch_from(vec![noisy_image(32, 12, 0.5)]);
        let _ = encode_image(&bundle, &batch).unwrap();
        let _ = encode_ssl(&bundle, &batch).unwrap();
        let _ = encode_text(&bundle, &["anything".to_string()]).unwrap();
        let prompts = PromptSet::new_seeded(2, bundle.vision.d_model(), 0);
        let _ = encode_image_prompted(&bundle, &batch, &prompts).unwrap();
        let g = Array2::ones((1, bundle.d_vlm()));
        let _ = bundle.vision.prompt_vjp(&batch, &prompts, &g).unwrap();
        assert_eq!(bundle.frozen_checksum(), before);
    }

    #[test]
    fn ssl_features_separate_fine_patterns_vlm_cannot_see() {
        // Two classes differ only in sub-patch structure whose 8x8 patch
        // means are identical, so the vision encoder is blind to the split
        // while the SSL encoder separates it. Fisher ratio oracle computed
        // directly on both embedding sets.
        let config = ToyEncoderConfig::default();
        let bundle = make_toy_encoders(&config, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            for _ in 0..24 {
                let mut img = Array2::from_elem((32, 32), 0.5);
                for cy in 0..4 {
                    for cx in 0..4 {
                        // Within each 8x8 cell, +amp on one diagonal pair of
                        // 4x4 sub-blocks and -amp on the other; the pairing
                        // flips between classes. Cell means stay 0.5 exactly.
                        for sy in 0..2 {
                            for sx in 0..2 {
                                let sign = if (sy == sx) == (class == 0) { 0.25 } else { -0.25 };
                                for py in 0..4 {
                                    for px in 0..4 {
                                        img[[cy * 8 + sy * 4 + py, cx * 8 + sx * 4 + px]] += sign;
                                    }
                                }
                            }
                        }
                    }
                }
                img.mapv_inplace(|v| (v + rng.random_range(-0.02f64..=0.02)).clamp(0.0, 1.0));
                images.push(img);
                labels.push(class);
            }
        }
        let batch = batch_from(images);
        let vlm = encode_image(&bundle, &batch).unwrap().vectors;
        let ssl = encode_ssl(&bundle, &batch).unwrap().vectors;

        let fisher = |feats: &Array2<f64>| -> f64 {
            let d = feats.ncols();
            let mut mu = vec![Array1::<f64>::zeros(d); 2];
            let mut counts = [0.0f64; 2];
            for (i, &l) in labels.iter().enumerate() {
                mu[l] = &mu[l] + &feats.row(i);
                counts[l] += 1.0;
            }
            for l in 0..2 {
                mu[l] /= counts[l];
            }
            let mut within = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                let diff = &feats.row(i) - &mu[l];
                within += diff.iter().map(|x| x * x).sum::<f64>();
            }
            within /= labels.len() as f64;
            let between = (&mu[0] - &mu[1]).iter().map(|x| x * x).sum::<f64>();
            between / within.max(1e-12)
        };
        let f_ssl = fisher(&ssl);
        let f_vlm = fisher(&vlm);
        assert!(
            f_ssl > f_vlm,
            "expected SSL features more separable: ssl {f_ssl:.3} vs vlm {f_vlm:.3}"
        );
    }
}
