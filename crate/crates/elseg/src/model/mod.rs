//! Segmentation-network contract and its two implementations.
//!
//! Models expose pre-softmax logits with the same spatial size as their
//! input; softmax lives in the loss and evaluation modules only. Parameters
//! are reachable as one flat vector so the trainer, the EMA update, and
//! checkpoints stay architecture-agnostic.

mod checkpoint;
mod full;
mod graph;
mod layers;
mod tiny;

use std::path::PathBuf;

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use full::ARCH_DESCRIPTOR as FULL_SCALE_ARCH;

/// Which architecture to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// ~80k-parameter encoder-decoder; the desk-scale test substrate.
    Tiny,
    /// 50-layer residual encoder with atrous pyramid pooling; GPU-scale.
    FullScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Load external pretrained weights (full-scale only).
    pub pretrained: bool,
    /// Weight container consumed when `pretrained` is set.
    pub pretrained_path: Option<PathBuf>,
    /// Total classes `C' = C + 1` including background.
    pub num_classes: usize,
}

impl BackboneSpec {
    pub fn tiny(num_classes: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Tiny,
            pretrained: false,
            pretrained_path: None,
            num_classes,
        }
    }
}

/// Contract every segmentation network satisfies.
pub trait SegmentationModel: Send {
    fn spec(&self) -> &BackboneSpec;

    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn param_len(&self) -> usize;

    /// Flat copy of all trainable parameters, in a fixed order.
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Accumulated parameter gradients, same layout as [`Self::params`].
    fn grads(&self) -> Vec<f64>;

    fn zero_grads(&mut self);

    /// Forward pass that records activations for [`Self::backward`].
    fn forward_train(&mut self, images: &ArrayView4<f64>) -> Array4<f64>;

    /// Backpropagate a logits gradient through the recorded activations.
    fn backward(&mut self, grad_logits: &ArrayView4<f64>) -> Result<()>;

    /// Inference pass; records nothing and never produces gradients.
    fn forward_eval(&self, images: &ArrayView4<f64>) -> Array4<f64>;

    fn clone_model(&self) -> Box<dyn SegmentationModel>;
}

struct GraphNet {
    spec: BackboneSpec,
    graph: graph::Graph,
    tape: Option<(graph::Tape, (usize, usize, usize, usize))>,
}

impl SegmentationModel for GraphNet {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn param_len(&self) -> usize {
        self.graph.param_len()
    }

    fn params(&self) -> Vec<f64> {
        self.graph.params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.graph.set_params(params)
    }

    fn grads(&self) -> Vec<f64> {
        self.graph.grads()
    }

    fn zero_grads(&mut self) {
        self.graph.zero_grads();
    }

    fn forward_train(&mut self, images: &ArrayView4<f64>) -> Array4<f64> {
        let (out, tape) = self.graph.forward_train(images);
        self.tape = Some((tape, out.dim()));
        out
    }

    fn backward(&mut self, grad_logits: &ArrayView4<f64>) -> Result<()> {
        let Some((tape, dim)) = &self.tape else {
            return Err(Error::Model(
                "backward called without a preceding forward_train".into(),
            ));
        };
        if grad_logits.dim() != *dim {
            return Err(Error::Shape(format!(
                "logits gradient {:?} does not match forward output {:?}",
                grad_logits.shape(),
                dim
            )));
        }
        self.graph.backward(tape, grad_logits);
        Ok(())
    }

    fn forward_eval(&self, images: &ArrayView4<f64>) -> Array4<f64> {
        self.graph.forward_eval(images)
    }

    fn clone_model(&self) -> Box<dyn SegmentationModel> {
        Box::new(GraphNet {
            spec: self.spec.clone(),
            graph: self.graph.clone(),
            tape: None,
        })
    }
}

/// Instantiate a model with deterministic seeded initialization; full-scale
/// with `pretrained` set additionally loads its weight container.
pub fn create_model(spec: &BackboneSpec, seed: u64) -> Result<Box<dyn SegmentationModel>> {
    if spec.num_classes < 2 {
        return Err(Error::Model(format!(
            "a segmentation model needs at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    let graph = match spec.kind {
        BackboneKind::Tiny => {
            if spec.pretrained {
                return Err(Error::Model(
                    "pretrained weights are only meaningful for the full-scale backbone".into(),
                ));
            }
            tiny::build(spec.num_classes, seed)
        }
        BackboneKind::FullScale => full::build(spec.num_classes, seed),
    };
    let mut net = GraphNet {
        spec: spec.clone(),
        graph,
        tape: None,
    };
    if spec.pretrained {
        let Some(path) = &spec.pretrained_path else {
            return Err(Error::Model(
                "pretrained requested but no pretrained_path configured".into(),
            ));
        };
        let container = Checkpoint::load(path)?;
        let params = container.section("params").ok_or_else(|| {
            Error::Checkpoint(format!(
                "weight container `{}` holds no `params` section",
                path.display()
            ))
        })?;
        net.set_params(params)?;
    }
    Ok(Box::new(net))
}

/// Copy every parameter from `source` into `target`.
pub fn clone_into(source: &dyn SegmentationModel, target: &mut dyn SegmentationModel) -> Result<()> {
    let src = source.spec();
    let dst = target.spec();
    if src.kind != dst.kind || src.num_classes != dst.num_classes {
        return Err(Error::Model(format!(
            "architecture mismatch: {:?}/{} vs {:?}/{}",
            src.kind, src.num_classes, dst.kind, dst.num_classes
        )));
    }
    target.set_params(&source.params())
}
