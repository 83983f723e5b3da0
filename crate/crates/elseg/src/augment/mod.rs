//! Weak and strong augmentation pipelines.
//!
//! The teacher sees weak views: normalization only. The student sees strong
//! views: color jitter, random grayscale, Gaussian blur, then normalization,
//! with CutMix applied afterwards by the trainer. All photometric ops leave
//! target maps untouched; only CutMix rewrites targets, and only inside its
//! recorded rectangles.

mod color;
mod cutmix;

use ndarray::{Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cutmix::{
    apply_cutmix_images, apply_cutmix_map, apply_cutmix_mask, cutmix, cutmix_rect_size,
    draw_cutmix_records, CutMixRecord, CutRect,
};

/// Per-channel normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizationConstants {
    fn default() -> Self {
        NormalizationConstants {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl NormalizationConstants {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "normalization std components must be positive, got {:?}",
                self.std
            )));
        }
        Ok(())
    }
}

/// Strong-branch photometric and CutMix parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongAugConfig {
    /// Max relative perturbation for brightness/contrast/saturation factors
    /// and (scaled by the hue half-range) the hue shift.
    pub jitter_max_delta: f64,
    pub grayscale_prob: f64,
    /// Inclusive kernel-size bounds; even draws round up to the next odd.
    pub blur_kernel_range: (usize, usize),
    pub blur_sigma_range: (f64, f64),
    pub cutmix_alpha: f64,
    pub cutmix_beta: f64,
    /// Whether the trainer applies CutMix at all, and whether it also applies
    /// to the labeled stream's ground-truth masks.
    pub cutmix_enabled: bool,
    pub cutmix_labeled: bool,
    /// Seed for the augmentation stream (independent of the sampler stream).
    pub seed: u64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        StrongAugConfig {
            jitter_max_delta: 0.5,
            grayscale_prob: 0.2,
            blur_kernel_range: (1, 5),
            blur_sigma_range: (0.1, 2.0),
            cutmix_alpha: 4.0,
            cutmix_beta: 4.0,
            cutmix_enabled: true,
            cutmix_labeled: true,
            seed: 0,
        }
    }
}

impl StrongAugConfig {
    /// Configuration whose strong branch is exactly the weak branch.
    pub fn identity() -> Self {
        StrongAugConfig {
            jitter_max_delta: 0.0,
            grayscale_prob: 0.0,
            blur_kernel_range: (1, 1),
            blur_sigma_range: (0.1, 2.0),
            cutmix_enabled: false,
            ..StrongAugConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.grayscale_prob) {
            return Err(Error::InvalidArgument(format!(
                "grayscale_prob must lie in [0,1], got {}",
                self.grayscale_prob
            )));
        }
        if self.jitter_max_delta < 0.0 || self.jitter_max_delta > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "jitter_max_delta must lie in [0,1], got {}",
                self.jitter_max_delta
            )));
        }
        if self.blur_kernel_range.0 == 0 || self.blur_kernel_range.0 > self.blur_kernel_range.1 {
            return Err(Error::InvalidArgument(format!(
                "blur kernel range must be ordered and positive, got {:?}",
                self.blur_kernel_range
            )));
        }
        if self.blur_sigma_range.0 <= 0.0 || self.blur_sigma_range.0 > self.blur_sigma_range.1 {
            return Err(Error::InvalidArgument(format!(
                "blur sigma range must be ordered and positive, got {:?}",
                self.blur_sigma_range
            )));
        }
        if self.cutmix_alpha <= 0.0 || self.cutmix_beta <= 0.0 {
            return Err(Error::InvalidArgument(
                "cutmix beta-distribution parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `(x - mean) / std` per channel over a `(B, 3, H, W)` batch.
pub fn normalize(batch: &ArrayView4<f64>, constants: &NormalizationConstants) -> Array4<f64> {
    let mut out = batch.to_owned();
    for c in 0..3 {
        out.index_axis_mut(ndarray::Axis(1), c)
            .mapv_inplace(|v| (v - constants.mean[c]) / constants.std[c]);
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &ArrayView4<f64>, constants: &NormalizationConstants) -> Array4<f64> {
    let mut out = batch.to_owned();
    for c in 0..3 {
        out.index_axis_mut(ndarray::Axis(1), c)
            .mapv_inplace(|v| v * constants.std[c] + constants.mean[c]);
    }
    out
}

/// Teacher view: normalization only, no spatial or color change.
pub fn weak_augment(batch: &ArrayView4<f64>, constants: &NormalizationConstants) -> Array4<f64> {
    normalize(batch, constants)
}

/// Student view: color jitter, random grayscale, Gaussian blur, normalize.
///
/// Each batch element draws an independent sub-stream from `rng`, so the
/// result does not depend on element evaluation order.
pub fn strong_augment(
    batch: &ArrayView4<f64>,
    cfg: &StrongAugConfig,
    constants: &NormalizationConstants,
    rng: &mut ChaCha8Rng,
) -> Array4<f64> {
    let mut out = batch.to_owned();
    let seeds: Vec<u64> = (0..batch.shape()[0]).map(|_| rng.gen()).collect();
    for (mut view, seed) in out.axis_iter_mut(ndarray::Axis(0)).zip(seeds) {
        let mut element_rng = ChaCha8Rng::seed_from_u64(seed);
        color::photometric_inplace(&mut view, cfg, &mut element_rng);
    }
    normalize(&out.view(), constants)
}
