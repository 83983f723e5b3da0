//! CutMix with pixel-level target transplant.
//!
//! For each batch element a mixing ratio is drawn from Beta(alpha, beta) and
//! a rectangle of area `(1 - lambda) * H * W` (up to rounding) is pasted from
//! a partner chosen by a random permutation of the batch. Image pixels and
//! target pixels move together; segmentation targets transplant at pixel
//! granularity rather than mixing soft labels.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// Paste rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CutRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

/// What one batch element received from its partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutMixRecord {
    /// Batch index the rectangle was copied from.
    pub source_index: usize,
    pub rect: CutRect,
    pub lambda_mix: f64,
}

/// Rectangle side lengths for a mixing ratio: `round(side * sqrt(1 - lambda))`.
pub fn cutmix_rect_size(lambda: f64, height: usize, width: usize) -> (usize, usize) {
    let scale = (1.0 - lambda).max(0.0).sqrt();
    let h = (height as f64 * scale).round() as usize;
    let w = (width as f64 * scale).round() as usize;
    (h, w)
}

/// Draw one record per batch element: a Beta(alpha, beta) ratio, a uniformly
/// placed in-bounds rectangle, and a partner from a random permutation.
pub fn draw_cutmix_records(
    batch: usize,
    height: usize,
    width: usize,
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CutMixRecord>> {
    if batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "cutmix needs a batch of at least 2, got {batch}"
        )));
    }
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::InvalidArgument(format!("invalid beta parameters: {e}")))?;
    let mut partners: Vec<usize> = (0..batch).collect();
    partners.shuffle(rng);

    let mut records = Vec::with_capacity(batch);
    for &source_index in &partners {
        let lambda = dist.sample(rng);
        let (h, w) = cutmix_rect_size(lambda, height, width);
        let rect = if h == 0 || w == 0 {
            CutRect { x: 0, y: 0, w: 0, h: 0 }
        } else {
            let y = rng.gen_range(0..=height - h);
            let x = rng.gen_range(0..=width - w);
            CutRect { x, y, w, h }
        };
        records.push(CutMixRecord {
            source_index,
            rect,
            lambda_mix: lambda,
        });
    }
    Ok(records)
}

/// Paste rectangles into an image batch; partner content is read from the
/// original (pre-mix) batch.
pub fn apply_cutmix_images(images: &ArrayView4<f64>, records: &[CutMixRecord]) -> Array4<f64> {
    let mut out = images.to_owned();
    for (i, rec) in records.iter().enumerate() {
        let r = rec.rect;
        for c in 0..images.shape()[1] {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    out[(i, c, y, x)] = images[(rec.source_index, c, y, x)];
                }
            }
        }
    }
    out
}

/// Paste rectangles into a `(B, H, W)` index-target batch.
pub fn apply_cutmix_mask(targets: &ArrayView3<u8>, records: &[CutMixRecord]) -> Array3<u8> {
    let mut out = targets.to_owned();
    for (i, rec) in records.iter().enumerate() {
        let r = rec.rect;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                out[(i, y, x)] = targets[(rec.source_index, y, x)];
            }
        }
    }
    out
}

/// Paste rectangles into a `(B, H, W)` real-valued map (e.g. confidences).
pub fn apply_cutmix_map(map: &ArrayView3<f64>, records: &[CutMixRecord]) -> Array3<f64> {
    let mut out = map.to_owned();
    for (i, rec) in records.iter().enumerate() {
        let r = rec.rect;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                out[(i, y, x)] = map[(rec.source_index, y, x)];
            }
        }
    }
    out
}

/// CutMix an image batch together with its per-pixel targets.
pub fn cutmix(
    images: &ArrayView4<f64>,
    targets: &ArrayView3<u8>,
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f64>, Array3<u8>, Vec<CutMixRecord>)> {
    let (b, _, h, w) = images.dim();
    if targets.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "cutmix images {:?} vs targets {:?}",
            images.shape(),
            targets.shape()
        )));
    }
    let records = draw_cutmix_records(b, h, w, alpha, beta, rng)?;
    let mixed_images = apply_cutmix_images(images, &records);
    let mixed_targets = apply_cutmix_mask(targets, &records);
    Ok((mixed_images, mixed_targets, records))
}
