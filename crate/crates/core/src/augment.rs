//! Weak/strong view generation. The weak view is the identity; the strong
//! view chains six op families: random resized crop, horizontal flip, color
//! jitter, gaussian blur, random scaling, and random perspective. Every
//! parameter is sampled from a per-(seed, sample-index) stream, so a batch
//! augments identically across runs.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Parameter ranges for the strong pipeline's six op families. Identity
/// values (unit ranges, zero strengths) turn an op into a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter: JitterStrength,
    pub blur_sigma: (f64, f64),
    pub scale_range: (f64, f64),
    pub perspective_distortion: f64,
}

impl AugmentationPipeline {
    /// The default strong recipe: crop scale [0.2, 1.0], jitter
    /// 0.4/0.4/0.4/0.1, blur sigma [0.1, 2.0], flip p 0.5, with mild
    /// scaling [0.8, 1.2] and perspective 0.2.
    pub fn strong_default() -> Self {
        AugmentationPipeline {
            crop_scale: (0.2, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            flip_p: 0.5,
            jitter: JitterStrength {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            blur_sigma: (0.1, 2.0),
            scale_range: (0.8, 1.2),
            perspective_distortion: 0.2,
        }
    }

    /// All six families present but parameterized to the identity.
    pub fn identity() -> Self {
        AugmentationPipeline {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter: JitterStrength {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
            },
            blur_sigma: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            perspective_distortion: 0.0,
        }
    }
}

/// The identity transform: a bit-exact passthrough of the source batch.
pub fn weak_augment(batch: &ImageBatch) -> ImageBatch {
    batch.clone()
}

/// Weak/strong views of one source batch, sample order aligned.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub weak: ImageBatch,
    pub strong: ImageBatch,
}

pub fn make_pair(batch: &ImageBatch, pipeline: &AugmentationPipeline, seed: u64) -> AugmentedPair {
    AugmentedPair {
        weak: weak_augment(batch),
        strong: strong_augment(batch, pipeline, seed),
    }
}

/// Apply the strong pipeline with independently sampled parameters per
/// image. Deterministic per (seed, sample index); output clipped to [0, 1].
pub fn strong_augment(batch: &ImageBatch, pipeline: &AugmentationPipeline, seed: u64) -> ImageBatch {
    let shape = batch.pixels.raw_dim();
    let mut out = Array4::zeros(shape);
    for (i, image) in batch.pixels.axis_iter(Axis(0)).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let augmented = augment_one(image, pipeline, &mut rng);
        out.index_axis_mut(Axis(0), i).assign(&augmented);
    }
    ImageBatch {
        ids: batch.ids.clone(),
        pixels: out,
    }
}

fn augment_one(
    image: ArrayView3<'_, f64>,
    p: &AugmentationPipeline,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    // Sample all parameters up front in a fixed order so the op
    // implementations cannot perturb the stream.
    let area_frac = rng.random_range(p.crop_scale.0..=p.crop_scale.1);
    let log_lo = p.crop_ratio.0.ln();
    let log_hi = p.crop_ratio.1.ln();
    let aspect = rng.random_range(log_lo..=log_hi).exp();
    let crop_jitter: (f64, f64) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
    let flip = rng.random_range(0.0..1.0) < p.flip_p;
    let j = &p.jitter;
    let brightness = rng.random_range((1.0 - j.brightness).max(0.0)..=1.0 + j.brightness);
    let contrast = rng.random_range((1.0 - j.contrast).max(0.0)..=1.0 + j.contrast);
    let saturation = rng.random_range((1.0 - j.saturation).max(0.0)..=1.0 + j.saturation);
    let hue = rng.random_range(-j.hue..=j.hue);
    let sigma = rng.random_range(p.blur_sigma.0..=p.blur_sigma.1);
    let scale = rng.random_range(p.scale_range.0..=p.scale_range.1);
    let q = p.perspective_distortion;
    let corner_shift: Vec<(f64, f64)> = (0..4)
        .map(|_| (rng.random_range(-q..=q), rng.random_range(-q..=q)))
        .collect();

    let mut img = resized_crop(image, area_frac, aspect, crop_jitter);
    if flip {
        img = hflip(&img);
    }
    img = color_jitter(&img, brightness, contrast, saturation, hue);
    if sigma > 1e-9 {
        img = gaussian_blur(&img, sigma);
    }
    if (scale - 1.0).abs() > 1e-12 {
        img = center_scale(&img, scale);
    }
    if q > 0.0 {
        img = perspective(&img, &corner_shift);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn bilinear(image: &Array3<f64>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (image.shape()[0] as isize, image.shape()[1] as isize);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let (y0i, x0i) = (y0 as isize, x0 as isize);
    let v00 = image[[clamp(y0i, h), clamp(x0i, w), c]];
    let v01 = image[[clamp(y0i, h), clamp(x0i + 1, w), c]];
    let v10 = image[[clamp(y0i + 1, h), clamp(x0i, w), c]];
    let v11 = image[[clamp(y0i + 1, h), clamp(x0i + 1, w), c]];
    v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx) + v11 * dy * dx
}

fn resized_crop(
    image: ArrayView3<'_, f64>,
    area_frac: f64,
    aspect: f64,
    jitter: (f64, f64),
) -> Array3<f64> {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let area = (h * w) as f64 * area_frac;
    let mut crop_w = (area * aspect).sqrt().round().max(1.0) as usize;
    let mut crop_h = (area / aspect).sqrt().round().max(1.0) as usize;
    crop_w = crop_w.min(w);
    crop_h = crop_h.min(h);
    let top = ((h - crop_h) as f64 * jitter.0).round() as usize;
    let left = ((w - crop_w) as f64 * jitter.1).round() as usize;

    let owned = image.to_owned();
    if crop_w == w && crop_h == h {
        return owned;
    }
    let mut out = Array3::zeros((h, w, ch));
    let sy = crop_h as f64 / h as f64;
    let sx = crop_w as f64 / w as f64;
    for y in 0..h {
        for x in 0..w {
            // Align source and destination pixel centers.
            let src_y = (y as f64 + 0.5) * sy - 0.5 + top as f64;
            let src_x = (x as f64 + 0.5) * sx - 0.5 + left as f64;
            for c in 0..ch {
                out[[y, x, c]] = bilinear(&owned, src_y, src_x, c);
            }
        }
    }
    out
}

fn hflip(image: &Array3<f64>) -> Array3<f64> {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out[[y, x, c]] = image[[y, w - 1 - x, c]];
            }
        }
    }
    out
}

fn color_jitter(
    image: &Array3<f64>,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
) -> Array3<f64> {
    let ch = image.shape()[2];
    let mut out = image * brightness;
    if (contrast - 1.0).abs() > 1e-12 {
        let mean = out.mean().unwrap_or(0.5);
        out.mapv_inplace(|v| mean + (v - mean) * contrast);
    }
    if ch == 3 {
        if (saturation - 1.0).abs() > 1e-12 {
            let (h, w) = (out.shape()[0], out.shape()[1]);
            for y in 0..h {
                for x in 0..w {
                    let gray = 0.299 * out[[y, x, 0]] + 0.587 * out[[y, x, 1]] + 0.114 * out[[y, x, 2]];
                    for c in 0..3 {
                        out[[y, x, c]] = gray + (out[[y, x, c]] - gray) * saturation;
                    }
                }
            }
        }
        if hue.abs() > 1e-12 {
            // Rotate RGB about the gray axis by hue * pi.
            let theta = hue * std::f64::consts::PI;
            let (cos_t, sin_t) = (theta.cos(), theta.sin());
            let one_third = 1.0 / 3.0;
            let sqrt_third = (1.0f64 / 3.0).sqrt();
            let m = |i: usize, j: usize| -> f64 {
                let eye = if i == j { 1.0 } else { 0.0 };
                cos_t * eye + (1.0 - cos_t) * one_third + sin_t * sqrt_third * rot_sign(i, j)
            };
            let (h, w) = (out.shape()[0], out.shape()[1]);
            for y in 0..h {
                for x in 0..w {
                    let rgb = [out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]];
                    for i in 0..3 {
                        out[[y, x, i]] = (0..3).map(|j| m(i, j) * rgb[j]).sum();
                    }
                }
            }
        }
    }
    out
}

fn rot_sign(i: usize, j: usize) -> f64 {
    // Antisymmetric part of the axis-angle rotation matrix about (1,1,1).
    match (i, j) {
        (0, 1) | (1, 2) | (2, 0) => -1.0,
        (1, 0) | (2, 1) | (0, 2) => 1.0,
        _ => 0.0,
    }
}

fn gaussian_blur(image: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    // Horizontal then vertical pass.
    let mut tmp = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius, w);
                    acc += k * image[[y, sx, c]];
                }
                tmp[[y, x, c]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius, h);
                    acc += k * tmp[[sy, x, c]];
                }
                out[[y, x, c]] = acc;
            }
        }
    }
    out
}

fn center_scale(image: &Array3<f64>, scale: f64) -> Array3<f64> {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let src_y = cy + (y as f64 - cy) / scale;
            let src_x = cx + (x as f64 - cx) / scale;
            for c in 0..ch {
                out[[y, x, c]] = bilinear(image, src_y, src_x, c);
            }
        }
    }
    out
}

/// Inverse-warp through the homography sending displaced output corners to
/// the original corners.
fn perspective(image: &Array3<f64>, corner_shift: &[(f64, f64)]) -> Array3<f64> {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (hf, wf) = (h as f64 - 1.0, w as f64 - 1.0);
    let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let dst: Vec<(f64, f64)> = src
        .iter()
        .zip(corner_shift)
        .map(|(&(x, y), &(dx, dy))| (x + dx * wf / 2.0, y + dy * hf / 2.0))
        .collect();
    let h_mat = match homography(&dst, &src) {
        Some(m) => m,
        // Degenerate corner placement; leave the image untouched.
        None => return image.clone(),
    };
    let mut out = Array3::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let xf = x as f64;
            let yf = y as f64;
            let denom = h_mat[6] * xf + h_mat[7] * yf + 1.0;
            let src_x = (h_mat[0] * xf + h_mat[1] * yf + h_mat[2]) / denom;
            let src_y = (h_mat[3] * xf + h_mat[4] * yf + h_mat[5]) / denom;
            for c in 0..ch {
                out[[y, x, c]] = bilinear(image, src_y, src_x, c);
            }
        }
    }
    out
}

/// 8-dof homography from four point correspondences via Gaussian
/// elimination with partial pivoting. Returns row-major [a..h] with i = 1.
fn homography(from: &[(f64, f64)], to: &[(f64, f64)]) -> Option<[f64; 8]> {
    let mut a = Array2::<f64>::zeros((8, 9));
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to.iter()).enumerate() {
        let r = 2 * i;
        a[[r, 0]] = x;
        a[[r, 1]] = y;
        a[[r, 2]] = 1.0;
        a[[r, 6]] = -x * u;
        a[[r, 7]] = -y * u;
        a[[r, 8]] = u;
        a[[r + 1, 3]] = x;
        a[[r + 1, 4]] = y;
        a[[r + 1, 5]] = 1.0;
        a[[r + 1, 6]] = -x * v;
        a[[r + 1, 7]] = -y * v;
        a[[r + 1, 8]] = v;
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap())?;
        if a[[pivot, col]].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for k in 0..9 {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[pivot, k]];
                a[[pivot, k]] = tmp;
            }
        }
        let diag = a[[col, col]];
        for k in 0..9 {
            a[[col, k]] /= diag;
        }
        for row in 0..8 {
            if row != col {
                let factor = a[[row, col]];
                if factor != 0.0 {
                    for k in 0..9 {
                        a[[row, k]] -= factor * a[[col, k]];
                    }
                }
            }
        }
    }
    let mut out = [0.0; 8];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[[i, 8]];
    }
    Some(out)
}
