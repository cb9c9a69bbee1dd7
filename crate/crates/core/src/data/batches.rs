//! Image loading and deterministic batch iteration.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use super::{DataError, DatasetManifest, ImageRecord, Split};

/// A batch of decoded images, pixel values in [0, 1], layout [B, H, W, C].
/// Encoder-specific normalization happens inside encoder adapters.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub ids: Vec<String>,
    pub pixels: Array4<f64>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[3]
    }
}

pub(crate) fn decode_image(path: &Path) -> Result<(Vec<f64>, usize, usize, usize), DataError> {
    let img = image::open(path).map_err(|e| DataError::ImageDecode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let px = g.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
            Ok((px, h as usize, w as usize, 1))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut px = Vec::with_capacity((w * h * 3) as usize);
            for p in rgb.pixels() {
                px.push(f64::from(p.0[0]) / 255.0);
                px.push(f64::from(p.0[1]) / 255.0);
                px.push(f64::from(p.0[2]) / 255.0);
            }
            Ok((px, h as usize, w as usize, 3))
        }
    }
}

fn load_batch(records: &[&ImageRecord]) -> Result<ImageBatch, DataError> {
    assert!(!records.is_empty());
    let (first, h, w, c) = decode_image(&records[0].path)?;
    let mut data = Vec::with_capacity(records.len() * h * w * c);
    data.extend_from_slice(&first);
    for rec in &records[1..] {
        let (px, rh, rw, rc) = decode_image(&rec.path)?;
        if (rh, rw, rc) != (h, w, c) {
            return Err(DataError::ImageDecode {
                path: rec.path.clone(),
                detail: format!("size {rh}x{rw}x{rc} differs from batch {h}x{w}x{c}"),
            });
        }
        data.extend_from_slice(&px);
    }
    let pixels = Array4::from_shape_vec((records.len(), h, w, c), data)
        .expect("batch buffer matches shape");
    Ok(ImageBatch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        pixels,
    })
}

/// Iterator over one epoch of batches in a seeded shuffle order.
pub struct BatchIter<'a> {
    records: Vec<&'a ImageRecord>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<ImageBatch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.records.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.records.len());
        let chunk = &self.records[self.cursor..end];
        self.cursor = end;
        Some(load_batch(chunk))
    }
}

/// Stream a split in batches. The emitted order is a pure function of
/// (manifest, split, batch_size, seed): same seed, same id sequence,
/// bit-for-bit. Each record appears exactly once; the final batch may be
/// smaller.
pub fn iterate_batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<BatchIter<'_>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidBatchSize);
    }
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    let mut refs: Vec<&ImageRecord> = records.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refs.shuffle(&mut rng);
    Ok(BatchIter {
        records: refs,
        batch_size,
        cursor: 0,
    })
}

/// Load specific records of a split by id, in the given id order.
pub fn load_images_by_id(
    manifest: &DatasetManifest,
    split: Split,
    ids: &[String],
) -> Result<ImageBatch, DataError> {
    let records = manifest.split(split);
    let mut refs = Vec::with_capacity(ids.len());
    for id in ids {
        let rec = records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| DataError::UnknownRecord(id.clone()))?;
        refs.push(rec);
    }
    if refs.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    load_batch(&refs)
}
