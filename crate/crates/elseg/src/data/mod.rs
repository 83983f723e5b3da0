//! Dataset ingestion: images, masks, manifests, splits, and batch sampling.
//!
//! Images are carried as channel-first `(3, H, W)` arrays of `f64` in
//! `[0, 1]`; masks as `(H, W)` arrays of `u8` class indices with background
//! at 0. A manifest is a line-oriented TSV listing labeled image/mask pairs
//! and unlabeled images.

mod geom;
mod io;
mod manifest;
mod sampler;
mod split;
mod synth;

use std::path::PathBuf;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub use geom::{center_crop_image, center_crop_mask, crop_image, crop_mask, resize_bilinear, resize_nearest};
pub use io::{load_image, load_mask, save_gray_image, save_mask, save_rgb_image};
pub use manifest::{load_manifest, save_manifest};
pub use sampler::{PairBatch, PairSampler};
pub(crate) use sampler::stream_rng;
pub use split::split_labeled_unlabeled;
pub use synth::{generate_synthetic_corpus, SynthConfig};

/// One loaded EL image.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// Channel-first `(3, H, W)` pixels in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub source_path: PathBuf,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Per-pixel class indices paired with an image.
#[derive(Debug, Clone)]
pub struct MaskSample {
    pub id: String,
    /// `(H, W)` class indices; every value must lie in `0..=C`.
    pub labels: Array2<u8>,
}

impl MaskSample {
    /// Check that all labels are valid for `num_defect_classes` defect classes.
    pub fn validate(&self, num_defect_classes: usize) -> Result<()> {
        let max = num_defect_classes as u8;
        if let Some(v) = self.labels.iter().find(|&&v| v > max) {
            return Err(Error::InvalidArgument(format!(
                "mask `{}` holds class {v} but only {num_defect_classes} defect classes exist",
                self.id
            )));
        }
        Ok(())
    }
}

/// A labeled (image, mask) path pair plus the unlabeled image list, with the
/// split metadata that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// (image path, mask path) pairs.
    pub labeled: Vec<(PathBuf, PathBuf)>,
    /// Image paths without masks.
    pub unlabeled: Vec<PathBuf>,
    pub split_seed: u64,
    pub labeled_fraction: f64,
}

impl DatasetManifest {
    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// Fail when a labeled image also appears in the unlabeled pool.
    pub fn check_disjoint(&self) -> Result<()> {
        use std::collections::HashSet;
        let labeled: HashSet<&PathBuf> = self.labeled.iter().map(|(img, _)| img).collect();
        for img in &self.unlabeled {
            if labeled.contains(img) {
                return Err(Error::InvalidArgument(format!(
                    "image `{}` listed as both labeled and unlabeled",
                    img.display()
                )));
            }
        }
        Ok(())
    }
}
