//! Seeded synthetic benchmark generator.
//!
//! Each class gets a prototype image with two planted signals:
//!
//! * a coarse block pattern (constant over vision-encoder patches), sampled
//!   per class and contracted toward the shared mean by `signal_scale`, so
//!   clusters are linearly separable in image-embedding space but close
//!   enough that per-sample noise decides the hard cases;
//! * a fine per-pixel texture whose vision-encoder patch means cancel
//!   exactly, so only the SSL encoder sees it. That is what makes SSL
//!   features more separable than vision-encoder features here.
//!
//! The class descriptions are then grown by greedy token pursuit: words are
//! appended while they pull the description's text embedding toward the
//! class prototype's image embedding, rotated away from it by `text_gap`.
//! The gap is the knob that keeps zero-shot accuracy mediocre while the
//! image features themselves stay separable, and it backs off per class if
//! a whole cluster would land on the wrong side of the zero-shot decision.
//!
//! Samples are prototypes plus per-pixel Gaussian noise, written as PNGs
//! with a manifest and a description cache, ready for the full pipeline.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::cde::build_cde;
use crate::data::{save_descriptions, DescriptionSet, DescriptionSource, ImageBatch};
use crate::encoders::{EncoderBundle, ToyEncoderConfig};
use crate::util::{derive_seed, l2_norm};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encode failed: {0}")]
    ImageEncode(String),
    #[error("unsupported spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Cde(#[from] crate::cde::CdeError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Encoder(#[from] crate::encoders::EncoderError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Range the coarse block values are drawn from before contraction.
    pub coarse_lo: f64,
    pub coarse_hi: f64,
    /// Amplitude of the fine per-pixel texture (vision-patch means cancel).
    pub fine_amp: f64,
    /// Per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Per-sample Gaussian noise at the vision-patch scale. This is the
    /// within-cluster spread the vision encoder actually sees (patch-mean
    /// pooling passes it at full amplitude), while SSL patches absorb it
    /// into a single direction. It is what keeps zero-shot errors a
    /// per-sample matter.
    pub block_noise: f64,
    /// Rotation of each class's description target away from its prototype
    /// embedding, in [0, 1]. Larger values drag zero-shot accuracy down
    /// without touching the underlying cluster separability.
    pub text_gap: f64,
    /// Contraction of class block grids toward their common mean. Smaller
    /// values move clusters closer together.
    pub signal_scale: f64,
    /// Words per generated description.
    pub description_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            train_per_class: 60,
            test_per_class: 40,
            image_size: 32,
            coarse_lo: 0.1,
            coarse_hi: 0.9,
            fine_amp: 0.15,
            noise_sigma: 0.055,
            block_noise: 0.04,
            text_gap: 0.6,
            signal_scale: 1.0,
            description_len: 16,
            seed: 0,
        }
    }
}

pub struct SyntheticPaths {
    pub manifest: PathBuf,
    pub descriptions: PathBuf,
}

/// Strong-augmentation ranges suited to the benchmark's small block
/// images. All six op families stay active, but the geometric ops are kept
/// gentle: the class signal here is a rigid spatial code, not a natural
/// image, so recipe-strength crops or flips would erase it rather than
/// perturb it.
pub fn benchmark_augmentation() -> crate::augment::AugmentationPipeline {
    crate::augment::AugmentationPipeline {
        crop_scale: (0.95, 1.0),
        crop_ratio: (0.97, 1.03),
        flip_p: 0.0,
        jitter: crate::augment::JitterStrength {
            brightness: 0.05,
            contrast: 0.05,
            saturation: 0.0,
            hue: 0.0,
        },
        blur_sigma: (0.1, 0.35),
        scale_range: (0.97, 1.03),
        perspective_distortion: 0.02,
    }
}

const CLASS_WORDS: &[&str] = &[
    "alpine", "breeze", "cinder", "dune", "ember", "fjord", "grove", "harbor", "iris", "juniper",
    "krill", "lagoon",
];

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fit block values so the grid's image embedding aligns with `target`:
/// finite-difference descent with a normalized step and backtracking.
fn fit_blocks(
    bundle: &EncoderBundle,
    target: &Array1<f64>,
    grid: usize,
    size: usize,
    patch: usize,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mid = 0.5 * (lo + hi);
    let spread = 0.25 * (hi - lo);
    let mut blocks =
        Array2::from_shape_fn((grid, grid), |_| mid + rng.random_range(-spread..=spread));
    let objective = |b: &Array2<f64>| -> f64 {
        let f = embed_single(bundle, &image_from_blocks(b, size, patch));
        1.0 - f.dot(target)
    };
    let h = 1e-4;
    let mut obj = objective(&blocks);
    let mut step = 0.1 * (hi - lo);
    let max_step = 0.25 * (hi - lo);
    for _ in 0..200 {
        let mut grad = Array2::zeros((grid, grid));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut plus = blocks.clone();
                plus[[gy, gx]] += h;
                let mut minus = blocks.clone();
                minus[[gy, gx]] -= h;
                grad[[gy, gx]] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-10 {
            break;
        }
        let mut improved = false;
        while step > 1e-5 {
            let cand = ndarray::Zip::from(&blocks)
                .and(&grad)
                .map_collect(|&b, &g| (b - step * g / gnorm).clamp(lo, hi));
            let cand_obj = objective(&cand);
            if cand_obj < obj - 1e-12 {
                blocks = cand;
                obj = cand_obj;
                step = (step * 1.3).min(max_step);
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    blocks
}

/// Draw per-class block grids several times and keep the draw whose class
/// embeddings have the largest minimum pairwise distance. This pins the
/// cluster geometry the rest of the benchmark depends on instead of leaving
/// it to a single-draw lottery.
fn draw_separated_blocks(
    bundle: &EncoderBundle,
    classes: usize,
    grid: usize,
    size: usize,
    patch: usize,
    lo: f64,
    hi: f64,
    scale: f64,
    seed: u64,
) -> Vec<Array2<f64>> {
    let mid = 0.5 * (lo + hi);
    let mut best: Option<(f64, Vec<Array2<f64>>)> = None;
    for draw in 0..48 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 40 + draw));
        let blocks: Vec<Array2<f64>> = (0..classes)
            .map(|_| {
                Array2::from_shape_fn((grid, grid), |_| {
                    mid + scale * (rng.random_range(lo..=hi) - mid)
                })
            })
            .collect();
        let embeddings: Vec<Array1<f64>> = blocks
            .iter()
            .map(|b| embed_single(bundle, &image_from_blocks(b, size, patch)))
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..classes {
            for j in i + 1..classes {
                let d = (&embeddings[i] - &embeddings[j])
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        if best.as_ref().map_or(true, |(d, _)| min_dist > *d) {
            best = Some((min_dist, blocks));
        }
    }
    best.expect("at least one draw").1
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(dim, |_| gaussian(rng));
    let n = l2_norm(v.view()).max(1e-12);
    v /= n;
    v
}

/// Image whose vision-encoder patch means are exactly the given block grid.
fn image_from_blocks(blocks: &Array2<f64>, size: usize, patch: usize) -> Array3<f64> {
    let mut img = Array3::zeros((size, size, 1));
    for y in 0..size {
        for x in 0..size {
            img[[y, x, 0]] = blocks[[y / patch, x / patch]];
        }
    }
    img
}

fn embed_single(bundle: &EncoderBundle, img: &Array3<f64>) -> Array1<f64> {
    let mut pixels = ndarray::Array4::zeros((1, img.shape()[0], img.shape()[1], 1));
    pixels.index_axis_mut(ndarray::Axis(0), 0).assign(img);
    let batch = ImageBatch {
        ids: vec!["probe".to_string()],
        pixels,
    };
    bundle
        .vision
        .encode(&batch)
        .expect("probe image matches encoder geometry")
        .vectors
        .row(0)
        .to_owned()
}

fn embed_text(bundle: &EncoderBundle, text: &str) -> Array1<f64> {
    bundle
        .text
        .encode(&[text.to_string()])
        .expect("non-empty text")
        .vectors
        .row(0)
        .to_owned()
}

/// Grow a description by greedy token pursuit: starting from the class
/// word, repeatedly append whichever dictionary word maximizes the given
/// score of the description's embedding. Words may repeat; everything is
/// evaluated black-box through the text encoder.
fn pursue_description(
    bundle: &EncoderBundle,
    score: &dyn Fn(&Array1<f64>) -> f64,
    class_word: &str,
    dictionary: &[String],
    len: usize,
) -> String {
    let mut tokens = vec![class_word.to_string()];
    let eval = |tokens: &[String]| score(&embed_text(bundle, &tokens.join(" ")));
    let mut best_score = eval(&tokens);
    // Greedy growth.
    for _ in 1..len {
        let mut best_word: Option<&str> = None;
        for word in dictionary {
            tokens.push(word.clone());
            let s = eval(&tokens);
            tokens.pop();
            if s > best_score + 1e-12 {
                best_score = s;
                best_word = Some(word);
            }
        }
        match best_word {
            Some(w) => tokens.push(w.to_string()),
            None => break,
        }
    }
    // Swap refinement: revisit every grown slot and keep any strict
    // improvement. Two sweeps recover most of what pure greed leaves.
    for _ in 0..2 {
        let mut improved = false;
        for slot in 1..tokens.len() {
            let original = tokens[slot].clone();
            let mut best_word = original.clone();
            for word in dictionary {
                tokens[slot] = word.clone();
                let s = eval(&tokens);
                if s > best_score + 1e-12 {
                    best_score = s;
                    best_word = word.clone();
                    improved = true;
                }
            }
            tokens[slot] = best_word;
        }
        if !improved {
            break;
        }
    }
    tokens.join(" ")
}

/// Per-class fine pattern: random +-amp per pixel, re-centered within every
/// vision patch so the vision encoder's patch means are exactly zero while
/// the SSL encoder's sub-patch projections see the full texture.
fn fine_pattern(size: usize, vlm_patch: usize, amp: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut pattern = Array3::zeros((size, size, 1));
    for v in pattern.iter_mut() {
        *v = if rng.random_range(0.0..1.0) < 0.5 { amp } else { -amp };
    }
    let cells = size / vlm_patch;
    let area = (vlm_patch * vlm_patch) as f64;
    for cy in 0..cells {
        for cx in 0..cells {
            let mut mean = 0.0;
            for py in 0..vlm_patch {
                for px in 0..vlm_patch {
                    mean += pattern[[cy * vlm_patch + py, cx * vlm_patch + px, 0]];
                }
            }
            mean /= area;
            for py in 0..vlm_patch {
                for px in 0..vlm_patch {
                    pattern[[cy * vlm_patch + py, cx * vlm_patch + px, 0]] -= mean;
                }
            }
        }
    }
    pattern
}

fn write_png(img: &Array3<f64>, path: &Path) -> Result<(), SynthError> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (img[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)
        .map_err(|e| SynthError::ImageEncode(e.to_string()))
}

/// Generate the benchmark into `dir`: `manifest.json`, `descriptions.json`,
/// and `images/*.png`. The encoder config and seed must match what the
/// pipeline run will use, since descriptions are pursued through those
/// encoders.
pub fn generate_synthetic_dataset(
    dir: &Path,
    spec: &SyntheticSpec,
    encoder_config: &ToyEncoderConfig,
    encoder_seed: u64,
) -> Result<SyntheticPaths, SynthError> {
    if spec.classes < 2 || spec.classes > CLASS_WORDS.len() {
        return Err(SynthError::BadSpec(format!(
            "classes must be in [2, {}]",
            CLASS_WORDS.len()
        )));
    }
    if spec.image_size != encoder_config.input_size {
        return Err(SynthError::BadSpec(format!(
            "image size {} does not match encoder input size {}",
            spec.image_size, encoder_config.input_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.text_gap) || !(0.0..=1.0).contains(&spec.signal_scale) {
        return Err(SynthError::BadSpec(
            "text_gap and signal_scale must lie in [0, 1]".into(),
        ));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| SynthError::Io {
        path: images_dir.clone(),
        source,
    })?;

    let class_names: Vec<String> = CLASS_WORDS[..spec.classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let bundle = crate::encoders::make_toy_encoders(encoder_config, encoder_seed);

    // Coarse prototypes: per-class block grids, best-of-N draw by minimum
    // pairwise embedding distance, plus the SSL-only fine texture.
    let size = spec.image_size;
    let patch = encoder_config.vlm_patch;
    let grid = size / patch;
    let blocks = draw_separated_blocks(
        &bundle,
        spec.classes,
        grid,
        size,
        patch,
        spec.coarse_lo,
        spec.coarse_hi,
        spec.signal_scale,
        derive_seed(spec.seed, 7),
    );

    let mut prototypes = Vec::with_capacity(spec.classes);
    let mut proto_embeddings = Vec::with_capacity(spec.classes);
    for (c, b) in blocks.iter().enumerate() {
        let coarse = image_from_blocks(b, size, patch);
        proto_embeddings.push(embed_single(&bundle, &coarse));
        let mut fine_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 300 + c as u64));
        let fine = fine_pattern(size, patch, spec.fine_amp, &mut fine_rng);
        prototypes.push(coarse + fine);
    }

    // Description pursuit. The encoder's output carries a large constant
    // component shared by every image, so raw embeddings of all classes are
    // nearly parallel; discriminative structure lives in the deviations
    // from the shared center. Each class's descriptions are grown to align
    // with its (gap-rotated) deviation direction while pinning the center
    // component to a class-independent level, so the resulting classifier
    // rows differ where the clusters differ and nowhere else.
    let mut center_emb = Array1::zeros(bundle.d_vlm());
    for f in &proto_embeddings {
        center_emb = center_emb + f;
    }
    center_emb /= spec.classes as f64;
    let center_hat = {
        let n = l2_norm(center_emb.view()).max(1e-12);
        &center_emb / n
    };
    let deviations: Vec<Array1<f64>> = proto_embeddings
        .iter()
        .map(|f| {
            let d = f - &center_emb;
            let n = l2_norm(d.view()).max(1e-12);
            d / n
        })
        .collect();

    let dictionary: Vec<String> = (0..512).map(|i| format!("tok{i:03}")).collect();
    let slices: Vec<Vec<String>> = (0..4)
        .map(|s| {
            dictionary
                .iter()
                .skip(s)
                .step_by(4)
                .cloned()
                .collect::<Vec<_>>()
        })
        .collect();
    // Pin the center component near the dictionary's natural level so the
    // penalty does not fight reachability.
    let natural_center: f64 = {
        let mut acc = 0.0;
        for w in dictionary.iter().take(32) {
            acc += embed_text(&bundle, w).dot(&center_hat).abs();
        }
        acc / 32.0
    };

    // The rotation directions are kept orthogonal to the whole
    // discriminative subspace (all deviations plus the center), so a larger
    // gap shrinks every class's zero-shot margin uniformly instead of
    // tilting some cluster toward a wrong row.
    let orth_basis: Vec<Array1<f64>> = {
        let mut basis: Vec<Array1<f64>> = Vec::new();
        for v in std::iter::once(&center_hat).chain(deviations.iter()) {
            let mut w = v.clone();
            for b in &basis {
                let dot = w.dot(b);
                w = w - b * dot;
            }
            let n = l2_norm(w.view());
            if n > 1e-9 {
                basis.push(w / n);
            }
        }
        basis
    };
    let orthogonal_unit = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        let mut u = random_unit(bundle.d_vlm(), rng);
        for b in &orth_basis {
            let dot = u.dot(b);
            u = u - b * dot;
        }
        let n = l2_norm(u.view()).max(1e-12);
        u / n
    };

    // Samples are drawn up front so the gap search below can score the
    // descriptions it is building against the actual train split.
    struct Sample {
        id: String,
        label: usize,
        is_train: bool,
        image: Array3<f64>,
    }
    let mut samples = Vec::new();
    for c in 0..spec.classes {
        for i in 0..spec.train_per_class + spec.test_per_class {
            let is_train = i < spec.train_per_class;
            let id = if is_train {
                format!("tr-{c}-{i:03}")
            } else {
                format!("te-{c}-{:03}", i - spec.train_per_class)
            };
            let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                1_000_000 + (c as u64) * 10_000 + i as u64,
            ));
            let block_shift =
                Array2::from_shape_fn((grid, grid), |_| spec.block_noise * gaussian(&mut noise_rng));
            let mut image = prototypes[c].clone();
            for y in 0..size {
                for x in 0..size {
                    let v = image[[y, x, 0]]
                        + block_shift[[y / patch, x / patch]]
                        + spec.noise_sigma * gaussian(&mut noise_rng);
                    image[[y, x, 0]] = v.clamp(0.0, 1.0);
                }
            }
            samples.push(Sample {
                id,
                label: c,
                is_train,
                image,
            });
        }
    }
    let train_features: Vec<(usize, Array1<f64>)> = samples
        .iter()
        .filter(|s| s.is_train)
        .map(|s| (s.label, embed_single(&bundle, &s.image)))
        .collect();

    // Gap search: grow descriptions at a trial gap, then score the implied
    // zero-shot accuracy and the top-k confident-selection purity on the
    // train split. The gap backs off whenever purity drops and widens while
    // zero-shot sits above its band, so the dataset lands in the regime
    // where zero-shot errs per sample but its confident core stays clean.
    let build_descriptions = |gap: f64| -> Result<DescriptionSet, SynthError> {
        let mut per_class = std::collections::BTreeMap::new();
        for c in 0..spec.classes {
            let mut gap_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 100 + c as u64));
            let u = orthogonal_unit(&mut gap_rng);
            let mut direction = &deviations[c] * (1.0 - gap) + &u * gap;
            let n = l2_norm(direction.view()).max(1e-12);
            direction /= n;
            let score = |emb: &Array1<f64>| -> f64 {
                emb.dot(&direction) - (emb.dot(&center_hat) - natural_center).abs()
            };
            let descs: Vec<String> = slices
                .iter()
                .map(|dict| {
                    pursue_description(&bundle, &score, &class_names[c], dict, spec.description_len)
                })
                .collect();
            per_class.insert(class_names[c].clone(), descs);
        }
        Ok(DescriptionSet {
            dataset: "synthetic".into(),
            templates: vec!["{} followed by pursued texture words".to_string()],
            per_class,
            class_order: class_names.clone(),
            source: DescriptionSource::CacheFile,
        })
    };
    let score_gap = |set: &DescriptionSet| -> Result<(f64, f64), SynthError> {
        let cde = build_cde(set, &bundle)?;
        let n = train_features.len();
        let mut correct = 0usize;
        let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); spec.classes];
        for (truth, f) in &train_features {
            let fn_ = l2_norm(f.view()).max(1e-12);
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            let mut cosines = Vec::with_capacity(spec.classes);
            for j in 0..spec.classes {
                let row = cde.weights.row(j);
                let cos = f.dot(&row) / (fn_ * l2_norm(row).max(1e-12));
                cosines.push(cos);
                if cos > best_cos {
                    best_cos = cos;
                    best = j;
                }
            }
            if best == *truth {
                correct += 1;
            }
            // Softmax confidence of the argmax class at the default scale.
            let max_logit = 100.0 * best_cos;
            let denom: f64 = cosines.iter().map(|c| (100.0 * c - max_logit).exp()).sum();
            per_class[best].push((1.0 / denom, *truth));
        }
        let k = ((0.2 * n as f64 / spec.classes as f64).floor() as usize).clamp(16, 512);
        let mut selected = 0usize;
        let mut pure = 0usize;
        for (label, mut members) in per_class.into_iter().enumerate() {
            members.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            for (_, truth) in members.into_iter().take(k) {
                selected += 1;
                if truth == label {
                    pure += 1;
                }
            }
        }
        Ok((
            correct as f64 / n as f64,
            pure as f64 / selected.max(1) as f64,
        ))
    };

    let trace = std::env::var("NOLA_SYNTH_TRACE").is_ok();
    let (purity_min, zs_lo, zs_hi) = (0.93, 0.45, 0.85);
    let mut gap = spec.text_gap;
    let mut descriptions = build_descriptions(gap)?;
    let mut converged = false;
    for round in 0..10 {
        let (zs, purity) = score_gap(&descriptions)?;
        if trace {
            eprintln!("[synth] round {round} gap {gap:.3} zs {zs:.3} purity {purity:.3}");
        }
        if purity < purity_min || zs < zs_lo {
            gap *= 0.72;
        } else if zs > zs_hi && purity > purity_min + 0.03 {
            gap = (gap * 1.25).min(0.97);
        } else {
            converged = true;
            break;
        }
        descriptions = build_descriptions(gap)?;
    }
    if !converged {
        let (zs, purity) = score_gap(&descriptions)?;
        // Accept a high-alignment endpoint; refuse geometries where the
        // confident selection would be polluted.
        if purity < purity_min || zs < zs_lo {
            return Err(SynthError::BadSpec(format!(
                "seed {} does not reach the construction targets \
                 (zero-shot {zs:.3}, selection purity {purity:.3}); try another seed",
                spec.seed
            )));
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in &samples {
        let file = format!("images/{}.png", s.id);
        write_png(&s.image, &dir.join(&file))?;
        let entry = serde_json::json!({ "id": s.id, "path": file, "label": s.label });
        if s.is_train {
            train.push(entry);
        } else {
            test.push(entry);
        }
    }

    let manifest_path = dir.join("manifest.json");
    let manifest_json = serde_json::json!({
        "name": "synthetic",
        "classes": class_names,
        "train": train,
        "test": test,
    });
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest_json).expect("manifest serializes"),
    )
    .map_err(|source| SynthError::Io {
        path: manifest_path.clone(),
        source,
    })?;

    let descriptions_path = dir.join("descriptions.json");
    save_descriptions(&descriptions, &descriptions_path)?;
    Ok(SyntheticPaths {
        manifest: manifest_path,
        descriptions: descriptions_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{iterate_batches, load_manifest, Split};
    use crate::encoders::{encode_image, encode_ssl};

    #[test]
    fn generation_is_deterministic() {
        let config = ToyEncoderConfig::default();
        let spec = SyntheticSpec::default();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(da.path(), &spec, &config, 0).unwrap();
        generate_synthetic_dataset(db.path(), &spec, &config, 0).unwrap();
        let bytes_a = std::fs::read(da.path().join("images/tr-0-000.png")).unwrap();
        let bytes_b = std::fs::read(db.path().join("images/tr-0-000.png")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let ma = std::fs::read(da.path().join("manifest.json")).unwrap();
        let mb = std::fs::read(db.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
        let desc_a = std::fs::read(da.path().join("descriptions.json")).unwrap();
        let desc_b = std::fs::read(db.path().join("descriptions.json")).unwrap();
        assert_eq!(desc_a, desc_b);
    }

    /// Reachability probe: can block grids be fitted so image embeddings
    /// align with description-derived rows?
    #[test]
    #[ignore]
    fn block_fit_reachability() {
        let config = ToyEncoderConfig::default();
        for seed in [0u64, 1, 2, 3] {
            let bundle = crate::encoders::make_toy_encoders(&config, seed);
            let class_names: Vec<String> =
                ["alpine", "breeze", "cinder", "dune"].iter().map(|s| s.to_string()).collect();
            let templates = [
                "a tiled field of {} blocks",
                "{} cells in a repeating texture",
                "an overhead grid of {} tiles",
            ];
            let mut per_class = std::collections::BTreeMap::new();
            for name in &class_names {
                per_class.insert(
                    name.clone(),
                    templates.iter().map(|t| t.replace("{}", name)).collect::<Vec<_>>(),
                );
            }
            let set = DescriptionSet {
                dataset: "probe".into(),
                templates: templates.iter().map(|s| s.to_string()).collect(),
                per_class,
                class_order: class_names.clone(),
                source: DescriptionSource::CacheFile,
            };
            let cde = build_cde(&set, &bundle).unwrap();
            for c in 0..4 {
                let target = cde.weights.row(c).to_owned();
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + c as u64);
                let blocks = fit_blocks(&bundle, &target, 4, 32, 8, 0.1, 0.9, &mut rng);
                let f = embed_single(&bundle, &image_from_blocks(&blocks, 32, 8));
                println!(
                    "seed {seed} class {c}: fitted cos {:.3}",
                    f.dot(&target)
                );
            }
        }
    }

    #[test]
    fn pursued_description_aligns_with_target() {
        let config = ToyEncoderConfig::default();
        let bundle = crate::encoders::make_toy_encoders(&config, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random_unit(config.d_vlm, &mut rng);
        let dictionary: Vec<String> = (0..240).map(|i| format!("tok{i:03}")).collect();
        let score = |emb: &Array1<f64>| emb.dot(&target);
        let desc = pursue_description(&bundle, &score, "alpine", &dictionary, 12);
        let cos = embed_text(&bundle, &desc).dot(&target);
        assert!(cos > 0.7, "pursuit only reached cosine {cos:.3} via {desc:?}");
        assert!(desc.starts_with("alpine "));
    }

    #[test]
    fn fine_pattern_patch_means_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pattern = fine_pattern(32, 8, 0.2, &mut rng);
        for cy in 0..4 {
            for cx in 0..4 {
                let mut sum = 0.0;
                for py in 0..8 {
                    for px in 0..8 {
                        sum += pattern[[cy * 8 + py, cx * 8 + px, 0]];
                    }
                }
                assert!(sum.abs() < 1e-9, "cell ({cy},{cx}) mean {sum}");
            }
        }
        // Texture keeps its amplitude after re-centering.
        let rms = (pattern.iter().map(|v| v * v).sum::<f64>() / 1024.0).sqrt();
        assert!(rms > 0.1, "pattern rms {rms}");
    }

    #[test]
    fn generated_set_loads_with_expected_shape() {
        let config = ToyEncoderConfig::default();
        let spec = SyntheticSpec::default();
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_synthetic_dataset(dir.path(), &spec, &config, 0).unwrap();
        let manifest = load_manifest(&paths.manifest).unwrap();
        assert_eq!(manifest.num_classes(), 4);
        assert_eq!(manifest.split(Split::Train).len(), 240);
        assert_eq!(manifest.split(Split::Test).len(), 160);
        let descriptions =
            crate::data::load_descriptions(&paths.descriptions, &manifest).unwrap();
        assert_eq!(descriptions.class_order, manifest.class_names);
        assert!(descriptions.total_descriptions() >= manifest.num_classes());
    }

    /// The construction plants a fine channel only the SSL encoder can
    /// see: with the coarse channel flattened away, SSL features still
    /// separate the classes while vision features are noise.
    #[test]
    fn fine_channel_is_ssl_only() {
        let config = ToyEncoderConfig::default();
        let spec = SyntheticSpec::default();
        let bundle = crate::encoders::make_toy_encoders(&config, 0);
        let size = spec.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2usize {
            let mut fine_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 300 + c as u64));
            let fine = fine_pattern(size, config.vlm_patch, spec.fine_amp, &mut fine_rng);
            for _ in 0..24 {
                let mut img = Array3::from_elem((size, size, 1), 0.5) + &fine;
                img.mapv_inplace(|v| {
                    (v + spec.noise_sigma * gaussian(&mut rng)).clamp(0.0, 1.0)
                });
                images.push(img);
                labels.push(c);
            }
        }
        let mut pixels = ndarray::Array4::zeros((images.len(), size, size, 1));
        for (i, img) in images.iter().enumerate() {
            pixels.index_axis_mut(ndarray::Axis(0), i).assign(img);
        }
        let batch = ImageBatch {
            ids: (0..images.len()).map(|i| format!("f{i}")).collect(),
            pixels,
        };
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
                within += (&feats.row(i) - &mu[l]).iter().map(|x| x * x).sum::<f64>();
            }
            within /= labels.len() as f64;
            let between = (&mu[0] - &mu[1]).iter().map(|x| x * x).sum::<f64>();
            between / within.max(1e-12)
        };
        let f_vlm = fisher(&vlm);
        let f_ssl = fisher(&ssl);
        assert!(
            f_ssl > 4.0 * f_vlm,
            "fine channel should be SSL-only: ssl {f_ssl:.3} vs vlm {f_vlm:.3}"
        );
    }

    fn feature_fishers(
        manifest: &crate::data::DatasetManifest,
        bundle: &crate::encoders::EncoderBundle,
    ) -> (f64, f64) {
        let mut vlm_rows = Vec::new();
        let mut ssl_rows = Vec::new();
        let mut labels = Vec::new();
        let normalize = |row: Array1<f64>| -> Array1<f64> {
            let n = l2_norm(row.view()).max(1e-12);
            row / n
        };
        for batch in iterate_batches(manifest, Split::Train, 64, 0).unwrap() {
            let batch = batch.unwrap();
            let v = encode_image(bundle, &batch).unwrap().vectors;
            let s = encode_ssl(bundle, &batch).unwrap().vectors;
            for (i, id) in batch.ids.iter().enumerate() {
                labels.push(id.split('-').nth(1).unwrap().parse::<usize>().unwrap());
                // Compare angular separability: normalize both feature sets.
                vlm_rows.push(normalize(v.row(i).to_owned()));
                ssl_rows.push(normalize(s.row(i).to_owned()));
            }
        }
        let classes = manifest.num_classes();
        let fisher = |rows: &Vec<Array1<f64>>| -> f64 {
            let d = rows[0].len();
            let mut mu = vec![Array1::<f64>::zeros(d); classes];
            let mut counts = vec![0.0; classes];
            for (r, &l) in rows.iter().zip(labels.iter()) {
                mu[l] = &mu[l] + r;
                counts[l] += 1.0;
            }
            for l in 0..classes {
                mu[l] /= counts[l];
            }
            let mut global = Array1::<f64>::zeros(d);
            for m in &mu {
                global = global + m;
            }
            global /= classes as f64;
            let mut between = 0.0;
            for m in &mu {
                between += (m - &global).iter().map(|x| x * x).sum::<f64>();
            }
            between /= classes as f64;
            let mut within = 0.0;
            for (r, &l) in rows.iter().zip(labels.iter()) {
                within += (r - &mu[l]).iter().map(|x| x * x).sum::<f64>();
            }
            within /= rows.len() as f64;
            between / within.max(1e-12)
        };
        (fisher(&vlm_rows), fisher(&ssl_rows))
    }

    /// Manual stage driver used to calibrate the default spec constants.
    /// Run with --ignored --nocapture to print the stage accuracies.
    #[test]
    #[ignore]
    fn calibration_probe() {
        for seed in 0u64..12 {
            let spec = SyntheticSpec {
                seed,
                ..Default::default()
            };
            match std::panic::catch_unwind(|| run_stages(&spec, seed)) {
                Ok((zs, dl, nola, f_vlm, f_ssl)) => println!(
                    "seed {seed}: zero_shot {zs:.3} dl {dl:.3} nola {nola:.3} \
                     fisher_vlm {f_vlm:.2} fisher_ssl {f_ssl:.2}"
                ),
                Err(_) => println!("seed {seed}: generation refused"),
            }
        }
    }

    /// Single-config probe with per-epoch detail, for augmentation and
    /// optimizer diagnostics.
    #[test]
    #[ignore]
    fn tuning_probe() {
        use crate::augment::AugmentationPipeline;
        use crate::cde::{predict, zero_shot_eval};
        use crate::dl::{dl_eval, train_alignment, AlignTrainConfig};
        use crate::pseudo::{compute_k, select_topk, SelectionPolicy};
        use crate::tune::{evaluate, tune_prompts, PromptTuneConfig};

        let seed: u64 = std::env::var("NOLA_PROBE_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let spec = SyntheticSpec {
            text_gap: 0.3,
            block_noise: 0.04,
            fine_amp: 0.22,
            noise_sigma: 0.05,
            seed,
            ..Default::default()
        };
        let config = ToyEncoderConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_synthetic_dataset(dir.path(), &spec, &config, seed).unwrap();
        let manifest = load_manifest(&paths.manifest).unwrap();
        let descriptions = crate::data::load_descriptions(&paths.descriptions, &manifest).unwrap();
        let bundle = crate::encoders::make_toy_encoders(&config, seed);
        let cde = build_cde(&descriptions, &bundle).unwrap();
        let zs = zero_shot_eval(&cde, &bundle, &manifest, Split::Test, 100.0).unwrap().top1;

        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut truths = Vec::new();
        for batch in iterate_batches(&manifest, Split::Train, 64, 0).unwrap() {
            let batch = batch.unwrap();
            let probs = predict(&cde, &encode_image(&bundle, &batch).unwrap(), 100.0).unwrap();
            for (i, id) in batch.ids.iter().enumerate() {
                truths.push(id.split('-').nth(1).unwrap().parse::<usize>().unwrap());
                ids.push(id.clone());
                rows.push(probs.probs.row(i).to_owned());
            }
        }
        let c = manifest.num_classes();
        let mut probs = Array2::zeros((ids.len(), c));
        for (i, r) in rows.iter().enumerate() {
            probs.row_mut(i).assign(r);
        }
        let probs = crate::cde::ProbabilityBatch {
            logits: probs.mapv(|p: f64| p.max(1e-12).ln()),
            probs,
            logit_scale: 100.0,
        };
        let policy = SelectionPolicy::default();
        let k = compute_k(ids.len(), c, &policy).unwrap();
        let pseudo = select_topk(&probs, &ids, k, &policy).unwrap();
        let purity = {
            let idx: std::collections::HashMap<&str, usize> =
                ids.iter().map(|s| s.as_str()).zip(truths.iter().copied()).collect();
            let good = pseudo.entries.iter().filter(|e| idx[e.id.as_str()] == e.label).count();
            good as f64 / pseudo.len() as f64
        };
        println!("zero_shot {zs:.3}, k {k}, pseudo purity {purity:.3}");

        let align = AlignTrainConfig { seed, ..Default::default() };
        let dl = train_alignment(&bundle, &pseudo, &manifest, &align).unwrap();
        println!(
            "dl train loss first {:.4} last {:.4}, test acc {:.3}",
            dl.train_loss[0],
            dl.train_loss.last().unwrap(),
            dl_eval(&dl, &manifest, Split::Test).unwrap().top1
        );

        let mild = AugmentationPipeline {
            crop_scale: (0.7, 1.0),
            crop_ratio: (0.9, 1.1),
            flip_p: 0.5,
            jitter: crate::augment::JitterStrength {
                brightness: 0.1,
                contrast: 0.1,
                saturation: 0.0,
                hue: 0.0,
            },
            blur_sigma: (0.0, 0.4),
            scale_range: (0.95, 1.05),
            perspective_distortion: 0.05,
        };
        // Reference: a plain linear head on the same frozen vision features
        // fitted to the DL labels, to bound what stage (c) could reach.
        {
            use crate::dl::FeatureSource;
            let mut dl_label_entries = Vec::new();
            let mut dist = vec![0usize; c];
            let mut agree = 0usize;
            for (id, t) in ids.iter().zip(truths.iter()) {
                let batch = crate::data::load_images_by_id(&manifest, Split::Train, &[id.clone()])
                    .unwrap();
                let p = crate::dl::dl_predict(&dl, &batch).unwrap();
                let label = p.argmax_labels()[0];
                dist[label] += 1;
                if label == *t {
                    agree += 1;
                }
                dl_label_entries.push(crate::pseudo::PseudoLabel {
                    id: id.clone(),
                    label,
                    confidence: 1.0,
                });
            }
            println!(
                "dl labels on train: purity {:.3}, distribution {dist:?}",
                agree as f64 / ids.len() as f64
            );
            let all = crate::pseudo::PseudoLabelSet {
                entries: dl_label_entries,
                k_used: ids.len(),
                per_class_counts: vec![0; c],
                policy: SelectionPolicy::default(),
            };
            let head_cfg = AlignTrainConfig {
                feature_source: FeatureSource::VlmVision,
                epochs: 80,
                seed,
                ..Default::default()
            };
            let head = train_alignment(&bundle, &all, &manifest, &head_cfg).unwrap();
            println!(
                "linear-head-on-vlm (dl labels): losses {:.3} -> {:.3}, test acc {:.3}",
                head.train_loss[0],
                head.train_loss.last().unwrap(),
                dl_eval(&head, &manifest, Split::Test).unwrap().top1
            );
        }

        let identity = AugmentationPipeline::identity();
        let bench = benchmark_augmentation();
        let _ = mild;
        for (name, aug, lr, epochs, prompts_on) in [
            ("bench/e60", bench.clone(), 2e-3, 60usize, true),
            ("bench/e150", bench.clone(), 2e-3, 150, true),
            ("identity/e60", identity.clone(), 2e-3, 60, true),
            ("bench/e60/cls-only", bench.clone(), 2e-3, 60, false),
        ] {
            let tune_cfg = PromptTuneConfig {
                num_prompts: 8,
                epochs,
                batch_size: 30,
                seed,
                lr,
                augment: aug,
                train_prompts: prompts_on,
                ..PromptTuneConfig::preset_main()
            };
            let tuned = tune_prompts(&bundle, &cde, &dl, &manifest, &tune_cfg).unwrap();
            let acc = evaluate(&tuned, &bundle, &manifest).unwrap().top1;
            // Fit quality on clean train images against the DL labels.
            let mut fit_num = 0usize;
            let mut fit_den = 0usize;
            for batch in iterate_batches(&manifest, Split::Train, 64, 1).unwrap() {
                let batch = batch.unwrap();
                let dl_labels = crate::dl::dl_predict(&dl, &batch).unwrap().argmax_labels();
                let features =
                    crate::encoders::encode_image_prompted(&bundle, &batch, &tuned.prompts)
                        .unwrap();
                let preds = predict(&tuned.classifier, &features, tuned.logit_scale)
                    .unwrap()
                    .argmax_labels();
                for (p, d) in preds.iter().zip(dl_labels.iter()) {
                    fit_den += 1;
                    if p == d {
                        fit_num += 1;
                    }
                }
            }
            let losses: Vec<String> = tuned
                .train_log
                .iter()
                .step_by(epochs / 8)
                .map(|e| format!("{:.3}", e.loss))
                .collect();
            println!(
                "{name}: test acc {acc:.3}, train fit-to-dl {:.3}, losses {}",
                fit_num as f64 / fit_den as f64,
                losses.join(" ")
            );
        }
    }

    /// Full pipeline vs the replace-labeller-with-classifier variant.
    #[test]
    #[ignore]
    fn ablation_probe() {
        use crate::cde::zero_shot_eval;
        use crate::dl::{dl_eval, train_alignment, AlignTrainConfig};
        use crate::pseudo::{compute_k, select_topk, SelectionPolicy};
        use crate::tune::{evaluate, tune_prompts, CdeLabeller, PromptTuneConfig};

        for seed in [0u64, 7, 9] {
            let spec = SyntheticSpec {
                seed,
                ..Default::default()
            };
            let config = ToyEncoderConfig::default();
            let dir = tempfile::tempdir().unwrap();
            let paths = generate_synthetic_dataset(dir.path(), &spec, &config, seed).unwrap();
            let manifest = load_manifest(&paths.manifest).unwrap();
            let descriptions =
                crate::data::load_descriptions(&paths.descriptions, &manifest).unwrap();
            let bundle = crate::encoders::make_toy_encoders(&config, seed);
            let cde = build_cde(&descriptions, &bundle).unwrap();
            let zs = zero_shot_eval(&cde, &bundle, &manifest, Split::Test, 100.0)
                .unwrap()
                .top1;

            let mut ids = Vec::new();
            let mut rows = Vec::new();
            for batch in iterate_batches(&manifest, Split::Train, 64, 0).unwrap() {
                let batch = batch.unwrap();
                let probs = crate::cde::predict(
                    &cde,
                    &encode_image(&bundle, &batch).unwrap(),
                    100.0,
                )
                .unwrap();
                for (i, id) in batch.ids.iter().enumerate() {
                    ids.push(id.clone());
                    rows.push(probs.probs.row(i).to_owned());
                }
            }
            let c = manifest.num_classes();
            let mut probs = Array2::zeros((ids.len(), c));
            for (i, r) in rows.iter().enumerate() {
                probs.row_mut(i).assign(r);
            }
            let probs = crate::cde::ProbabilityBatch {
                logits: probs.mapv(|p: f64| p.max(1e-12).ln()),
                probs,
                logit_scale: 100.0,
            };
            let policy = SelectionPolicy::default();
            let k = compute_k(ids.len(), c, &policy).unwrap();
            let pseudo = select_topk(&probs, &ids, k, &policy).unwrap();
            let align = AlignTrainConfig {
                seed,
                ..Default::default()
            };
            let dl = train_alignment(&bundle, &pseudo, &manifest, &align).unwrap();
            let dl_acc = dl_eval(&dl, &manifest, Split::Test).unwrap().top1;

            let tune_cfg = PromptTuneConfig {
                num_prompts: 8,
                epochs: 150,
                batch_size: 30,
                seed,
                augment: benchmark_augmentation(),
                ..PromptTuneConfig::preset_main()
            };
            let full = evaluate(
                &tune_prompts(&bundle, &cde, &dl, &manifest, &tune_cfg).unwrap(),
                &bundle,
                &manifest,
            )
            .unwrap()
            .top1;
            let cde_labeller = CdeLabeller {
                bundle: bundle.clone(),
                classifier: cde.clone(),
                logit_scale: 100.0,
            };
            let variant = evaluate(
                &tune_prompts(&bundle, &cde, &cde_labeller, &manifest, &tune_cfg).unwrap(),
                &bundle,
                &manifest,
            )
            .unwrap()
            .top1;
            println!(
                "seed {seed}: zs {zs:.3} dl {dl_acc:.3} full {full:.3} cde-variant {variant:.3}"
            );
        }
    }

    fn run_stages(spec: &SyntheticSpec, encoder_seed: u64) -> (f64, f64, f64, f64, f64) {
        use crate::cde::{predict, zero_shot_eval};
        use crate::dl::{dl_eval, train_alignment, AlignTrainConfig};
        use crate::pseudo::{compute_k, select_topk, SelectionPolicy};
        use crate::tune::{evaluate, tune_prompts, PromptTuneConfig};

        let config = ToyEncoderConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_synthetic_dataset(dir.path(), spec, &config, encoder_seed).unwrap();
        let manifest = load_manifest(&paths.manifest).unwrap();
        let descriptions =
            crate::data::load_descriptions(&paths.descriptions, &manifest).unwrap();
        let bundle = crate::encoders::make_toy_encoders(&config, encoder_seed);
        let (f_vlm, f_ssl) = feature_fishers(&manifest, &bundle);
        let cde = build_cde(&descriptions, &bundle).unwrap();
        let zs = zero_shot_eval(&cde, &bundle, &manifest, Split::Test, 100.0)
            .unwrap()
            .top1;

        // Zero-shot over the train split for selection (labels untouched).
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for batch in iterate_batches(&manifest, Split::Train, 64, 0).unwrap() {
            let batch = batch.unwrap();
            let probs = predict(&cde, &encode_image(&bundle, &batch).unwrap(), 100.0).unwrap();
            for (i, id) in batch.ids.iter().enumerate() {
                ids.push(id.clone());
                rows.push(probs.probs.row(i).to_owned());
            }
        }
        let c = manifest.num_classes();
        let mut probs = Array2::zeros((ids.len(), c));
        for (i, r) in rows.iter().enumerate() {
            probs.row_mut(i).assign(r);
        }
        let probs = crate::cde::ProbabilityBatch {
            logits: probs.mapv(|p: f64| p.max(1e-12).ln()),
            probs,
            logit_scale: 100.0,
        };
        let policy = SelectionPolicy::default();
        let k = compute_k(ids.len(), c, &policy).unwrap();
        let pseudo = select_topk(&probs, &ids, k, &policy).unwrap();

        let align = AlignTrainConfig {
            seed: encoder_seed,
            ..Default::default()
        };
        let dl = train_alignment(&bundle, &pseudo, &manifest, &align).unwrap();
        let dl_acc = dl_eval(&dl, &manifest, Split::Test).unwrap().top1;

        let tune_cfg = PromptTuneConfig {
            num_prompts: 8,
            epochs: 150,
            batch_size: 30,
            seed: encoder_seed,
            augment: benchmark_augmentation(),
            ..PromptTuneConfig::preset_main()
        };
        let tuned = tune_prompts(&bundle, &cde, &dl, &manifest, &tune_cfg).unwrap();
        let nola = evaluate(&tuned, &bundle, &manifest).unwrap().top1;
        (zs, dl_acc, nola, f_vlm, f_ssl)
    }
}
