//! Semi-supervised semantic segmentation for electroluminescence (EL) defect
//! detection.
//!
//! The crate trains a student/teacher pair of segmentation networks on a mix
//! of labeled and unlabeled EL images: the teacher sees weakly augmented
//! views and produces per-pixel pseudo-labels, the student sees strongly
//! augmented views (photometric jitter plus CutMix) and is optimized with a
//! supervised cross-entropy on labeled pixels plus a thresholded
//! positive/negative consistency loss against the teacher. Teacher weights
//! track the student through an exponential moving average.
//!
//! Top-level pieces:
//! - [`data`]: manifests, deterministic labeled/unlabeled splits, paired
//!   mini-batch sampling, and a synthetic desk-scale corpus generator.
//! - [`augment`]: weak (normalize-only) and strong (jitter/grayscale/blur)
//!   pipelines and CutMix with pixel-level target transplant.
//! - [`loss`]: supervised cross-entropy, the thresholded semi cross-entropy
//!   terms, and an MSE consistency baseline, all with analytic gradients.
//! - [`model`]: the segmentation-network contract, a tiny CPU-trainable
//!   encoder-decoder, a full-scale atrous encoder-decoder, and checkpoints.
//! - [`trainer`]: the mean-teacher training loop (SGD student updates, EMA
//!   teacher updates).
//! - [`eval`]: confusion matrices, per-class and macro metrics, log views,
//!   and confidence maps.
//! - [`config`] / [`sweep`] / [`report`]: experiment front end.

pub mod augment;
pub mod catalog;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod plot;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use catalog::{ClassCatalog, IGNORE_LABEL};
pub use error::{Error, Result};
