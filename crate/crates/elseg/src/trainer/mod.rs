//! Mean-teacher training loop.
//!
//! Each step samples a labeled and an unlabeled mini-batch, feeds weak views
//! to the teacher to obtain pseudo-labels, feeds strong views (photometric
//! ops plus CutMix with pixel-level target transplant) to the student,
//! and optimizes `L_sup + lambda * L_cons` with SGD on the student only;
//! teacher weights then track the student by EMA. All randomness derives
//! from `(seed, epoch)` sub-streams, so a run resumed at an epoch boundary
//! replays the uninterrupted run exactly.

mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_cutmix_images, apply_cutmix_map, apply_cutmix_mask, draw_cutmix_records, strong_augment,
    weak_augment, NormalizationConstants, StrongAugConfig,
};
use crate::catalog::ClassCatalog;
use crate::config::ExperimentConfig;
use crate::data::{
    self, center_crop_image, center_crop_mask, crop_image, crop_mask, resize_bilinear,
    resize_nearest, DatasetManifest, PairSampler,
};
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionMatrix, MetricsReport};
use crate::loss::{
    self, make_pseudo_labels, mse_consistency_with_grad, supervised_ce_with_grad, PseudoLabelBatch,
    SemiCEConfig,
};
use crate::model::{create_model, Checkpoint, SegmentationModel};

pub use optim::{ema_update, SgdMomentum};

const TAG_CROP: u64 = 0xc0;
const TAG_AUG: u64 = 0xa6;

/// Which consistency loss the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyKind {
    SemiCE,
    Mse,
}

/// Which network a final evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalNetwork {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    /// Images resize to `base_size` square, then crop to `crop_size` square
    /// (random offset while training, centered for evaluation).
    pub base_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// Epoch interval between checkpoints (the final epoch always writes).
    pub checkpoint_every: usize,
    pub semice: SemiCEConfig,
    pub consistency: ConsistencyKind,
    pub eval_network: EvalNetwork,
    /// Diagnostic switch: add background rows to evaluation reports.
    pub include_background: bool,
    pub aug: StrongAugConfig,
    pub norm: NormalizationConstants,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            ema_alpha: 0.99,
            base_size: 299,
            crop_size: 224,
            seed: 1,
            checkpoint_every: 1,
            semice: SemiCEConfig::default(),
            consistency: ConsistencyKind::SemiCE,
            eval_network: EvalNetwork::Student,
            include_background: false,
            aug: StrongAugConfig::default(),
            norm: NormalizationConstants::default(),
        }
    }
}

impl TrainerConfig {
    pub fn lambda(&self) -> f64 {
        self.semice.lambda_consistency
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::InvalidArgument(format!(
                "ema_alpha must lie in [0,1], got {}",
                self.ema_alpha
            )));
        }
        if self.crop_size > self.base_size {
            return Err(Error::InvalidArgument(format!(
                "crop_size {} exceeds base_size {}",
                self.crop_size, self.base_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("checkpoint_every must be positive".into()));
        }
        self.semice.validate()?;
        self.aug.validate()?;
        self.norm.validate()
    }
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub supervised: f64,
    pub consistency: f64,
}

/// Per-epoch summary row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub pixel_acc: f64,
    pub miou: f64,
}

/// One labeled mini-batch: images with their ground-truth masks.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Array4<f64>,
    pub masks: Array3<u8>,
}

/// Everything the loop owns while training.
pub struct TrainState {
    pub epoch: usize,
    pub global_step: usize,
    pub student: Box<dyn SegmentationModel>,
    pub teacher: Box<dyn SegmentationModel>,
    pub optimizer: SgdMomentum,
    /// Augmentation stream, re-derived from `(aug.seed, epoch)` each epoch.
    pub aug_rng: ChaCha8Rng,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(exp: &ExperimentConfig) -> Result<Self> {
        let cfg = &exp.trainer;
        cfg.validate()?;
        let student = create_model(&exp.model, cfg.seed)?;
        let teacher = student.clone_model();
        let optimizer = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.weight_decay, student.param_len());
        Ok(TrainState {
            epoch: 0,
            global_step: 0,
            student,
            teacher,
            optimizer,
            aug_rng: data::stream_rng(cfg.aug.seed, 0, TAG_AUG),
            history: Vec::new(),
        })
    }

    fn reseed_epoch(&mut self, aug_seed: u64, epoch: usize) {
        self.aug_rng = data::stream_rng(aug_seed, epoch as u64, TAG_AUG);
    }
}

/// One optimization step of Algorithm-style mean-teacher training.
///
/// Teacher pseudo-labels come from the weak (un-mixed) views; CutMix records
/// drawn for the student's strong views transplant image pixels and every
/// target map (ground truth, pseudo-labels, confidences, class
/// probabilities) through identical rectangles.
pub fn train_step(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: Option<&Array4<f64>>,
    cfg: &TrainerConfig,
) -> Result<StepLosses> {
    let lambda = cfg.lambda();
    let use_consistency = lambda > 0.0;

    // teacher pseudo-labels on weak views (no gradients ever reach the teacher)
    let pseudo_l = if use_consistency {
        let weak = weak_augment(&labeled.images.view(), &cfg.norm);
        Some(make_pseudo_labels(&state.teacher.forward_eval(&weak.view()).view()))
    } else {
        None
    };
    let pseudo_u = match (use_consistency, unlabeled) {
        (true, Some(u)) if u.shape()[0] > 0 => {
            let weak = weak_augment(&u.view(), &cfg.norm);
            Some(make_pseudo_labels(&state.teacher.forward_eval(&weak.view()).view()))
        }
        _ => None,
    };

    // strong student views; with the consistency term off the unlabeled
    // stream has no gradient path, so it is not worth a forward pass
    let mut strong_l = strong_augment(&labeled.images.view(), &cfg.aug, &cfg.norm, &mut state.aug_rng);
    let mut strong_u = unlabeled
        .filter(|u| use_consistency && u.shape()[0] > 0)
        .map(|u| strong_augment(&u.view(), &cfg.aug, &cfg.norm, &mut state.aug_rng));

    // CutMix with pixel-level target transplant
    let mut masks_l = labeled.masks.clone();
    let mut pseudo_l = pseudo_l;
    let mut pseudo_u = pseudo_u;
    let batch_l = strong_l.shape()[0];
    if cfg.aug.cutmix_enabled && cfg.aug.cutmix_labeled && batch_l >= 2 {
        let (_, _, h, w) = strong_l.dim();
        let records = draw_cutmix_records(
            batch_l,
            h,
            w,
            cfg.aug.cutmix_alpha,
            cfg.aug.cutmix_beta,
            &mut state.aug_rng,
        )?;
        strong_l = apply_cutmix_images(&strong_l.view(), &records);
        masks_l = apply_cutmix_mask(&masks_l.view(), &records);
        if let Some(p) = pseudo_l.take() {
            pseudo_l = Some(transplant_pseudo(&p, &records));
        }
    }
    if let Some(u) = strong_u.take() {
        let batch_u = u.shape()[0];
        if cfg.aug.cutmix_enabled && batch_u >= 2 {
            let (_, _, h, w) = u.dim();
            let records = draw_cutmix_records(
                batch_u,
                h,
                w,
                cfg.aug.cutmix_alpha,
                cfg.aug.cutmix_beta,
                &mut state.aug_rng,
            )?;
            strong_u = Some(apply_cutmix_images(&u.view(), &records));
            if let Some(p) = pseudo_u.take() {
                pseudo_u = Some(transplant_pseudo(&p, &records));
            }
        } else {
            strong_u = Some(u);
        }
    }

    // one student forward over the concatenated streams
    let joined = match &strong_u {
        Some(u) => ndarray::concatenate(Axis(0), &[strong_l.view(), u.view()])
            .map_err(|_| Error::Shape("labeled/unlabeled stream shapes disagree".into()))?,
        None => strong_l.clone(),
    };
    let logits = state.student.forward_train(&joined.view());
    let logits_l = logits.slice(ndarray::s![..batch_l, .., .., ..]).to_owned();

    let (sup, sup_grad_l) = supervised_ce_with_grad(&logits_l.view(), &masks_l.view())?;
    if !sup.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.global_step,
            term: "supervised".into(),
        });
    }

    let mut grad = Array4::<f64>::zeros(logits.dim());
    grad.slice_mut(ndarray::s![..batch_l, .., .., ..])
        .assign(&sup_grad_l);

    let mut cons = 0.0;
    if use_consistency {
        let logits_u = logits.slice(ndarray::s![batch_l.., .., .., ..]).to_owned();
        let (value, grad_l, grad_u) = consistency_with_grad(
            cfg,
            &logits_l,
            &logits_u,
            pseudo_l.as_ref(),
            pseudo_u.as_ref(),
        )?;
        cons = value;
        if !cons.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.global_step,
                term: "consistency".into(),
            });
        }
        let mut gl = grad.slice_mut(ndarray::s![..batch_l, .., .., ..]);
        gl += &(&grad_l * lambda);
        if grad_u.shape()[0] > 0 {
            let mut gu = grad.slice_mut(ndarray::s![batch_l.., .., .., ..]);
            gu += &(&grad_u * lambda);
        }
    }

    // student SGD step, then teacher EMA
    state.student.zero_grads();
    state.student.backward(&grad.view())?;
    let mut params = state.student.params();
    let grads = state.student.grads();
    state.optimizer.step(&mut params, &grads)?;
    state.student.set_params(&params)?;

    let mut teacher_params = state.teacher.params();
    ema_update(&mut teacher_params, &params, cfg.ema_alpha)?;
    state.teacher.set_params(&teacher_params)?;

    state.global_step += 1;
    Ok(StepLosses {
        total: loss::total_loss(sup, cons, lambda),
        supervised: sup,
        consistency: cons,
    })
}

/// Replay CutMix records over every field of a pseudo-label batch.
fn transplant_pseudo(
    pseudo: &PseudoLabelBatch,
    records: &[crate::augment::CutMixRecord],
) -> PseudoLabelBatch {
    PseudoLabelBatch {
        labels: apply_cutmix_mask(&pseudo.labels.view(), records),
        confidence: apply_cutmix_map(&pseudo.confidence.view(), records),
        class_probs: apply_cutmix_images(&pseudo.class_probs.view(), records),
    }
}

/// Consistency loss over whichever streams are present.
fn consistency_with_grad(
    cfg: &TrainerConfig,
    logits_l: &Array4<f64>,
    logits_u: &Array4<f64>,
    pseudo_l: Option<&PseudoLabelBatch>,
    pseudo_u: Option<&PseudoLabelBatch>,
) -> Result<(f64, Array4<f64>, Array4<f64>)> {
    let empty_l = || Array4::<f64>::zeros(logits_l.dim());
    let empty_u = || Array4::<f64>::zeros(logits_u.dim());
    match cfg.consistency {
        ConsistencyKind::SemiCE => match (pseudo_l, pseudo_u) {
            (Some(pl), Some(pu)) => loss::consistency_loss_with_grad(
                &logits_l.view(),
                &logits_u.view(),
                pl,
                pu,
                &cfg.semice,
            ),
            (Some(pl), None) => {
                let (v, g) = semice_single_stream(&logits_l.view(), pl, &cfg.semice)?;
                Ok((v, g, empty_u()))
            }
            (None, Some(pu)) => {
                let (v, g) = semice_single_stream(&logits_u.view(), pu, &cfg.semice)?;
                Ok((v, empty_l(), g))
            }
            (None, None) => Ok((0.0, empty_l(), empty_u())),
        },
        ConsistencyKind::Mse => {
            let mut total = 0.0;
            let mut gl = empty_l();
            let mut gu = empty_u();
            let mut n = 0usize;
            if let Some(pl) = pseudo_l {
                let (v, g) = mse_consistency_with_grad(&logits_l.view(), &pl.class_probs.view())?;
                total += v * logits_l.len() as f64;
                gl = g * logits_l.len() as f64;
                n += logits_l.len();
            }
            if let Some(pu) = pseudo_u {
                let (v, g) = mse_consistency_with_grad(&logits_u.view(), &pu.class_probs.view())?;
                total += v * logits_u.len() as f64;
                gu = g * logits_u.len() as f64;
                n += logits_u.len();
            }
            if n == 0 {
                return Ok((0.0, gl, gu));
            }
            let inv = 1.0 / n as f64;
            Ok((total * inv, gl * inv, gu * inv))
        }
    }
}

fn semice_single_stream(
    logits: &ndarray::ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    cfg: &SemiCEConfig,
) -> Result<(f64, Array4<f64>)> {
    let (pos, gp) = loss::semice_positive_impl(logits, pseudo, cfg.t_pos, cfg.mean_over)?;
    let (neg, gn) = loss::semice_negative_impl(logits, pseudo, cfg.t_neg, cfg.mean_over)?;
    Ok((pos + neg, gp + gn))
}

/// In-memory dataset, resized to `base_size`.
struct LoadedData {
    labeled_images: Vec<Array3<f64>>,
    labeled_masks: Vec<Array2<u8>>,
    unlabeled_images: Vec<Array3<f64>>,
}

fn load_dataset(
    manifest: &DatasetManifest,
    base_size: usize,
    num_defect_classes: usize,
) -> Result<LoadedData> {
    let mut labeled_images = Vec::with_capacity(manifest.labeled.len());
    let mut labeled_masks = Vec::with_capacity(manifest.labeled.len());
    for (img_path, mask_path) in &manifest.labeled {
        let img = data::load_image(img_path)?;
        let mask = data::load_mask(mask_path)?;
        if mask.labels.dim() != (img.height(), img.width()) {
            return Err(Error::Shape(format!(
                "mask `{}` does not match its image size",
                mask_path.display()
            )));
        }
        mask.validate(num_defect_classes)?;
        labeled_images.push(resize_bilinear(img.pixels.view(), base_size, base_size));
        labeled_masks.push(resize_nearest(mask.labels.view(), base_size, base_size));
    }
    let mut unlabeled_images = Vec::with_capacity(manifest.unlabeled.len());
    for img_path in &manifest.unlabeled {
        let img = data::load_image(img_path)?;
        unlabeled_images.push(resize_bilinear(img.pixels.view(), base_size, base_size));
    }
    Ok(LoadedData {
        labeled_images,
        labeled_masks,
        unlabeled_images,
    })
}

/// Resolve the manifest named by the experiment into labeled/unlabeled pools,
/// applying the configured split and the unlabeled-discard switch.
pub fn resolve_manifest(exp: &ExperimentConfig) -> Result<DatasetManifest> {
    let mut manifest = data::load_manifest(&exp.train_manifest)?;
    if exp.labeled_fraction < 1.0 {
        let (labeled, extra_unlabeled) =
            data::split_labeled_unlabeled(&manifest.labeled, exp.labeled_fraction, exp.split_seed)?;
        manifest.labeled = labeled;
        manifest.unlabeled.extend(extra_unlabeled);
        manifest.labeled_fraction = exp.labeled_fraction;
        manifest.split_seed = exp.split_seed;
    }
    if exp.discard_unlabeled {
        manifest.unlabeled.clear();
    }
    manifest.check_disjoint()?;
    Ok(manifest)
}

fn assemble_labeled(
    data: &LoadedData,
    indices: &[usize],
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledBatch {
    let mut images = Array4::<f64>::zeros((indices.len(), 3, crop, crop));
    let mut masks = Array3::<u8>::zeros((indices.len(), crop, crop));
    for (i, &idx) in indices.iter().enumerate() {
        let (_, h, w) = data.labeled_images[idx].dim();
        let top = rng.gen_range(0..=h - crop);
        let left = rng.gen_range(0..=w - crop);
        images
            .index_axis_mut(Axis(0), i)
            .assign(&crop_image(data.labeled_images[idx].view(), top, left, crop));
        masks
            .index_axis_mut(Axis(0), i)
            .assign(&crop_mask(data.labeled_masks[idx].view(), top, left, crop));
    }
    LabeledBatch { images, masks }
}

fn assemble_unlabeled(
    data: &LoadedData,
    indices: &[usize],
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Array4<f64> {
    let mut images = Array4::<f64>::zeros((indices.len(), 3, crop, crop));
    for (i, &idx) in indices.iter().enumerate() {
        let (_, h, w) = data.unlabeled_images[idx].dim();
        let top = rng.gen_range(0..=h - crop);
        let left = rng.gen_range(0..=w - crop);
        images
            .index_axis_mut(Axis(0), i)
            .assign(&crop_image(data.unlabeled_images[idx].view(), top, left, crop));
    }
    images
}

/// Pixel accuracy and defect-class mIoU of `model` over the labeled pool
/// (center crops, weak normalization).
fn eval_on_pool(
    model: &dyn SegmentationModel,
    data: &LoadedData,
    cfg: &TrainerConfig,
) -> Result<(f64, f64)> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let crop = cfg.crop_size;
    for (img, mask) in data.labeled_images.iter().zip(data.labeled_masks.iter()) {
        let image = center_crop_image(img.view(), crop);
        let truth = center_crop_mask(mask.view(), crop);
        let batch = image.insert_axis(Axis(0));
        let normalized = weak_augment(&batch.view(), &cfg.norm);
        let logits = model.forward_eval(&normalized.view());
        let pred = eval::predict_mask(&logits.index_axis(Axis(0), 0));
        cm.accumulate(&pred.view(), &truth.view())?;
    }
    let miou = eval::miou(&cm, false).map(|(m, _)| m).unwrap_or(0.0);
    Ok((cm.pixel_accuracy(), miou))
}

/// Artifacts produced by [`train`].
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn checkpoint_from_state(state: &TrainState, exp: &ExperimentConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        spec: exp.model.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        meta: serde_json::json!({
            "history": state.history,
            "ema_alpha": exp.trainer.ema_alpha,
            "config": exp.to_flat(),
            "full_scale_arch": crate::model::FULL_SCALE_ARCH,
        }),
        sections: vec![
            ("student".to_string(), state.student.params()),
            ("teacher".to_string(), state.teacher.params()),
            ("momentum".to_string(), state.optimizer.velocity().to_vec()),
        ],
    })
}

fn restore_state(state: &mut TrainState, ckpt: &Checkpoint) -> Result<()> {
    let missing = |name: &str| Error::Checkpoint(format!("checkpoint lacks `{name}` section"));
    state
        .student
        .set_params(ckpt.section("student").ok_or_else(|| missing("student"))?)?;
    state
        .teacher
        .set_params(ckpt.section("teacher").ok_or_else(|| missing("teacher"))?)?;
    state
        .optimizer
        .set_velocity(ckpt.section("momentum").ok_or_else(|| missing("momentum"))?)?;
    state.epoch = ckpt.epoch;
    state.global_step = ckpt.global_step;
    state.history = serde_json::from_value(ckpt.meta["history"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad history in checkpoint: {e}")))?;
    Ok(())
}

fn write_log(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Eval(e.to_string()))?;
    writer
        .write_record(["epoch", "step", "loss_total", "loss_sup", "loss_cons", "pixel_acc", "miou"])
        .map_err(|e| Error::Eval(e.to_string()))?;
    for row in history {
        writer
            .write_record([
                row.epoch.to_string(),
                row.step.to_string(),
                format!("{:.6}", row.loss_total),
                format!("{:.6}", row.loss_sup),
                format!("{:.6}", row.loss_cons),
                format!("{:.6}", row.pixel_acc),
                format!("{:.6}", row.miou),
            ])
            .map_err(|e| Error::Eval(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Run the full training loop described by `exp`, optionally resuming from a
/// checkpoint written at an epoch boundary.
pub fn train(exp: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = &exp.trainer;
    cfg.validate()?;
    fs::create_dir_all(&exp.out_dir).map_err(|e| Error::io(&exp.out_dir, e))?;
    fs::write(exp.out_dir.join("config.resolved.cfg"), exp.to_flat())
        .map_err(|e| Error::io(exp.out_dir.join("config.resolved.cfg"), e))?;

    let manifest = resolve_manifest(exp)?;
    if manifest.num_labeled() == 0 {
        return Err(Error::InvalidArgument(
            "training requires at least one labeled image".into(),
        ));
    }
    let dataset = load_dataset(&manifest, cfg.base_size, exp.num_defect_classes)?;

    let mut state = TrainState::new(exp)?;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.spec.kind != exp.model.kind || ckpt.spec.num_classes != exp.model.num_classes {
            return Err(Error::Checkpoint(format!(
                "checkpoint `{}` was written by a different architecture",
                path.display()
            )));
        }
        restore_state(&mut state, &ckpt)?;
    }

    let mut sampler = PairSampler::new(
        dataset.labeled_images.len(),
        dataset.unlabeled_images.len(),
        cfg.batch_size,
        cfg.seed,
    )?;
    let steps_per_epoch = sampler.steps_per_epoch();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        sampler.seek_epoch(epoch);
        state.reseed_epoch(cfg.aug.seed, epoch);
        let mut crop_rng = data::stream_rng(cfg.seed, epoch as u64, TAG_CROP);

        let mut sums = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let batch = sampler.next_pair();
            let labeled = assemble_labeled(&dataset, &batch.labeled, cfg.crop_size, &mut crop_rng);
            let unlabeled = if batch.unlabeled.is_empty() {
                None
            } else {
                Some(assemble_unlabeled(&dataset, &batch.unlabeled, cfg.crop_size, &mut crop_rng))
            };
            let losses = train_step(&mut state, &labeled, unlabeled.as_ref(), cfg)?;
            sums.0 += losses.total;
            sums.1 += losses.supervised;
            sums.2 += losses.consistency;
        }

        let eval_model: &dyn SegmentationModel = match cfg.eval_network {
            EvalNetwork::Student => state.student.as_ref(),
            EvalNetwork::Teacher => state.teacher.as_ref(),
        };
        let (pixel_acc, miou) = eval_on_pool(eval_model, &dataset, cfg)?;

        state.epoch += 1;
        let denom = steps_per_epoch.max(1) as f64;
        state.history.push(EpochStats {
            epoch: state.epoch,
            step: state.global_step,
            loss_total: sums.0 / denom,
            loss_sup: sums.1 / denom,
            loss_cons: sums.2 / denom,
            pixel_acc,
            miou,
        });

        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            let path = exp.out_dir.join(format!("ckpt_epoch{:03}.ckpt", state.epoch));
            checkpoint_from_state(&state, exp)?.save(&path)?;
        }
    }

    let final_checkpoint = exp.out_dir.join("ckpt_final.ckpt");
    checkpoint_from_state(&state, exp)?.save(&final_checkpoint)?;
    let log_path = exp.out_dir.join("training_log.csv");
    write_log(&log_path, &state.history)?;

    Ok(TrainOutcome {
        state,
        final_checkpoint,
        log_path,
    })
}

/// Evaluate a checkpoint on the experiment's evaluation manifest, writing
/// `metrics.csv`, raw and log-scaled confusion CSVs, and per-image
/// confidence-map and segmentation-overlay images under `out_dir`.
pub fn evaluate(exp: &ExperimentConfig, ckpt_path: &Path, out_dir: &Path) -> Result<MetricsReport> {
    let cfg = &exp.trainer;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut model = create_model(&ckpt.spec, cfg.seed)?;
    let section = match cfg.eval_network {
        EvalNetwork::Student => "student",
        EvalNetwork::Teacher => "teacher",
    };
    let params = ckpt
        .section(section)
        .or_else(|| ckpt.section("params"))
        .ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint holds neither `{section}` nor `params`"))
        })?;
    model.set_params(params)?;

    let eval_path = exp
        .eval_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.eval_manifest is required for evaluation".into()))?;
    let manifest = data::load_manifest(eval_path)?;
    if manifest.num_labeled() == 0 {
        return Err(Error::Eval("evaluation manifest holds no labeled pairs".into()));
    }
    let dataset = load_dataset(&manifest, cfg.base_size, exp.num_defect_classes)?;
    let catalog = ClassCatalog::synthetic(exp.num_defect_classes);

    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (i, (img, mask)) in dataset
        .labeled_images
        .iter()
        .zip(dataset.labeled_masks.iter())
        .enumerate()
    {
        let image = center_crop_image(img.view(), cfg.crop_size);
        let truth = center_crop_mask(mask.view(), cfg.crop_size);
        let batch = image.clone().insert_axis(Axis(0));
        let normalized = weak_augment(&batch.view(), &cfg.norm);
        let logits = model.forward_eval(&normalized.view());
        let single = logits.index_axis(Axis(0), 0);
        let pred = eval::predict_mask(&single);
        cm.accumulate(&pred.view(), &truth.view())?;

        let confidence = eval::confidence_map(&single);
        data::save_gray_image(&image_dir.join(format!("confidence_{i:04}.png")), &confidence)?;
        let overlay = class_overlay(&image, &pred);
        data::save_rgb_image(&image_dir.join(format!("overlay_{i:04}.png")), &overlay)?;
    }

    let report = eval::report(&cm, &catalog)?;
    let background = if cfg.include_background {
        Some(&cm)
    } else {
        None
    };
    write_metrics_csv_with_background(&out_dir.join("metrics.csv"), &report, background)?;
    write_matrix_csv(&out_dir.join("confusion.csv"), &cm.counts().mapv(|v| v as f64), 0)?;
    write_matrix_csv(&out_dir.join("confusion_log.csv"), &eval::log_view(&cm), 4)?;
    Ok(report)
}

/// Blend a fixed per-class color over the image wherever a defect is
/// predicted.
fn class_overlay(image: &Array3<f64>, pred: &Array2<u8>) -> Array3<f64> {
    const COLORS: [[f64; 3]; 4] = [
        [0.86, 0.08, 0.24],
        [0.12, 0.56, 1.00],
        [0.20, 0.80, 0.20],
        [1.00, 0.65, 0.00],
    ];
    let mut out = image.clone();
    for ((y, x), &class) in pred.indexed_iter() {
        if class == 0 {
            continue;
        }
        let color = COLORS[(class as usize - 1) % COLORS.len()];
        for c in 0..3 {
            out[(c, y, x)] = 0.4 * out[(c, y, x)] + 0.6 * color[c];
        }
    }
    out
}

/// `metrics.csv` rows: defect classes, the defect-only average, and (for the
/// background diagnostic switch) a background row plus an all-class average.
fn write_metrics_csv_with_background(
    path: &Path,
    report: &MetricsReport,
    background: Option<&ConfusionMatrix>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Eval(e.to_string()))?;
    let fail = |e: csv::Error| Error::Eval(e.to_string());
    writer
        .write_record(["class", "iou", "precision", "recall", "f1"])
        .map_err(fail)?;
    let row = |name: &str, iou: f64, p: f64, r: f64, f: f64| {
        [
            name.to_string(),
            format!("{iou:.6}"),
            format!("{p:.6}"),
            format!("{r:.6}"),
            format!("{f:.6}"),
        ]
    };
    for class in &report.per_class {
        writer
            .write_record(row(&class.class_name, class.iou, class.precision, class.recall, class.f1))
            .map_err(fail)?;
    }
    writer
        .write_record(row(
            "average",
            report.macro_iou,
            report.macro_precision,
            report.macro_recall,
            report.macro_f1,
        ))
        .map_err(fail)?;
    if let Some(cm) = background {
        let p = eval::precision(cm, 0);
        let r = eval::recall(cm, 0);
        writer
            .write_record(row("background", eval::iou(cm, 0), p, r, eval::f1(p, r)))
            .map_err(fail)?;
        let present: Vec<usize> = (0..cm.num_classes()).filter(|&c| cm.class_present(c)).collect();
        if !present.is_empty() {
            let mean = |f: &dyn Fn(usize) -> f64| {
                present.iter().map(|&c| f(c)).sum::<f64>() / present.len() as f64
            };
            writer
                .write_record(row(
                    "average_incl_background",
                    mean(&|c| eval::iou(cm, c)),
                    mean(&|c| eval::precision(cm, c)),
                    mean(&|c| eval::recall(cm, c)),
                    mean(&|c| eval::f1(eval::precision(cm, c), eval::recall(cm, c))),
                ))
                .map_err(fail)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_matrix_csv(path: &Path, matrix: &Array2<f64>, decimals: usize) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Eval(e.to_string()))?;
    for row in matrix.rows() {
        let record: Vec<String> = row.iter().map(|v| format!("{v:.decimals$}")).collect();
        writer
            .write_record(&record)
            .map_err(|e| Error::Eval(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SynthConfig};
    use crate::model::BackboneSpec;
    use std::path::Path;

    fn tiny_trainer_config(epochs: usize, batch: usize, seed: u64) -> TrainerConfig {
        TrainerConfig {
            epochs,
            batch_size: batch,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0001,
            ema_alpha: 0.99,
            base_size: 32,
            crop_size: 32,
            seed,
            checkpoint_every: 100,
            semice: SemiCEConfig::default(),
            consistency: ConsistencyKind::SemiCE,
            eval_network: EvalNetwork::Student,
            include_background: false,
            aug: StrongAugConfig {
                seed,
                ..StrongAugConfig::default()
            },
            norm: NormalizationConstants::default(),
        }
    }

    fn synth_experiment(
        dir: &Path,
        count: usize,
        fraction: f64,
        discard_unlabeled: bool,
        cfg: TrainerConfig,
    ) -> ExperimentConfig {
        let corpus_dir = dir.join("corpus");
        generate_synthetic_corpus(
            &SynthConfig {
                count,
                height: 32,
                width: 32,
                num_classes: 2,
                seed: 7,
            },
            &corpus_dir,
        )
        .unwrap();
        ExperimentConfig {
            train_manifest: corpus_dir.join("manifest.tsv"),
            eval_manifest: Some(corpus_dir.join("manifest.tsv")),
            labeled_fraction: fraction,
            split_seed: cfg.seed,
            discard_unlabeled,
            num_defect_classes: 2,
            model: BackboneSpec::tiny(3),
            trainer: cfg,
            out_dir: dir.join("run"),
        }
    }

    #[test]
    fn teacher_follows_student_by_exact_ema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_trainer_config(1, 4, 3);
        let exp = synth_experiment(dir.path(), 12, 0.5, false, cfg.clone());
        let manifest = resolve_manifest(&exp).unwrap();
        let dataset = load_dataset(&manifest, 32, 2).unwrap();
        let mut state = TrainState::new(&exp).unwrap();

        let mut crop_rng = data::stream_rng(cfg.seed, 0, TAG_CROP);
        let mut sampler = PairSampler::new(
            dataset.labeled_images.len(),
            dataset.unlabeled_images.len(),
            cfg.batch_size,
            cfg.seed,
        )
        .unwrap();

        for _ in 0..3 {
            let batch = sampler.next_pair();
            let labeled = assemble_labeled(&dataset, &batch.labeled, 32, &mut crop_rng);
            let unlabeled = assemble_unlabeled(&dataset, &batch.unlabeled, 32, &mut crop_rng);
            let teacher_before = state.teacher.params();
            train_step(&mut state, &labeled, Some(&unlabeled), &cfg).unwrap();
            let student_after = state.student.params();
            let mut expected = teacher_before;
            ema_update(&mut expected, &student_after, cfg.ema_alpha).unwrap();
            assert_eq!(state.teacher.params(), expected, "optimizer leaked into teacher");
        }
    }

    #[test]
    fn lambda_zero_without_unlabeled_matches_plain_supervised_loop() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_trainer_config(2, 4, 5);
        cfg.semice.lambda_consistency = 0.0;
        cfg.aug = StrongAugConfig {
            seed: 5,
            ..StrongAugConfig::identity()
        };
        let exp = synth_experiment(dir.path(), 12, 1.0, true, cfg.clone());
        let outcome = train(&exp, None).unwrap();

        // independent plain-supervised reference over identical batches
        let manifest = resolve_manifest(&exp).unwrap();
        let dataset = load_dataset(&manifest, 32, 2).unwrap();
        let mut model = create_model(&exp.model, cfg.seed).unwrap();
        let mut velocity = vec![0.0; model.param_len()];
        let mut sampler =
            PairSampler::new(dataset.labeled_images.len(), 0, cfg.batch_size, cfg.seed).unwrap();
        let mut losses = Vec::new();
        for epoch in 0..cfg.epochs {
            sampler.seek_epoch(epoch);
            let mut crop_rng = data::stream_rng(cfg.seed, epoch as u64, TAG_CROP);
            let mut sum = 0.0;
            for _ in 0..sampler.steps_per_epoch() {
                let batch = sampler.next_pair();
                let labeled = assemble_labeled(&dataset, &batch.labeled, 32, &mut crop_rng);
                let normalized = weak_augment(&labeled.images.view(), &cfg.norm);
                let logits = model.forward_train(&normalized.view());
                let (loss, grad) =
                    supervised_ce_with_grad(&logits.view(), &labeled.masks.view()).unwrap();
                model.zero_grads();
                model.backward(&grad.view()).unwrap();
                let mut params = model.params();
                let grads = model.grads();
                for i in 0..params.len() {
                    let g = grads[i] + cfg.weight_decay * params[i];
                    velocity[i] = cfg.momentum * velocity[i] + g;
                    params[i] -= cfg.lr * velocity[i];
                }
                model.set_params(&params).unwrap();
                sum += loss;
            }
            losses.push(sum / sampler.steps_per_epoch() as f64);
        }

        for (got, expected) in outcome.state.history.iter().zip(losses.iter()) {
            assert!(
                (got.loss_total - expected).abs() < 1e-5,
                "trainer {} vs reference {expected}",
                got.loss_total
            );
            assert_eq!(got.loss_cons, 0.0);
        }
        assert_eq!(model.params(), outcome.state.student.params());
    }

    #[test]
    fn identical_seeds_replay_identical_trajectories() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let run = |dir: &Path| {
            let exp = synth_experiment(dir, 16, 0.5, false, tiny_trainer_config(2, 4, 11));
            train(&exp, None).unwrap()
        };
        let a = run(dir1.path());
        let b = run(dir2.path());
        assert_eq!(a.state.history, b.state.history);
        assert_eq!(a.state.student.params(), b.state.student.params());
        let log1 = std::fs::read(&a.log_path).unwrap();
        let log2 = std::fs::read(&b.log_path).unwrap();
        assert_eq!(log1, log2, "training logs must be byte-identical");
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_trainer_config(0, 4, 2);
        let exp = synth_experiment(dir.path(), 8, 1.0, true, cfg.clone());
        let outcome = train(&exp, None).unwrap();
        assert!(outcome.state.history.is_empty());
        assert_eq!(outcome.state.global_step, 0);
        let fresh = create_model(&exp.model, cfg.seed).unwrap();
        assert_eq!(outcome.state.student.params(), fresh.params());
    }

    #[test]
    fn global_step_counts_completed_batches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_trainer_config(3, 4, 13);
        let exp = synth_experiment(dir.path(), 10, 0.5, false, cfg);
        let outcome = train(&exp, None).unwrap();
        // 5 labeled of 10 -> unlabeled pool 5; dominant pool 5, batch 4 -> 2 steps/epoch
        assert_eq!(outcome.state.global_step, 3 * 2);
        assert_eq!(outcome.state.history.last().unwrap().step, 6);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let dir_full = tempfile::tempdir().unwrap();
        let dir_split = tempfile::tempdir().unwrap();

        let full_exp = synth_experiment(dir_full.path(), 12, 0.5, false, tiny_trainer_config(4, 4, 17));
        let full = train(&full_exp, None).unwrap();

        let mut first_cfg = tiny_trainer_config(2, 4, 17);
        first_cfg.checkpoint_every = 1;
        let first_exp = synth_experiment(dir_split.path(), 12, 0.5, false, first_cfg);
        let first = train(&first_exp, None).unwrap();

        let mut second_exp = first_exp.clone();
        second_exp.trainer.epochs = 4;
        let resumed = train(&second_exp, Some(&first.final_checkpoint)).unwrap();

        assert_eq!(resumed.state.global_step, full.state.global_step);
        assert_eq!(resumed.state.student.params(), full.state.student.params());
        assert_eq!(resumed.state.teacher.params(), full.state.teacher.params());
        assert_eq!(resumed.state.history, full.state.history);
    }

    #[test]
    fn diverged_training_aborts_with_the_offending_term() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_trainer_config(5, 4, 19);
        cfg.lr = 1e18;
        let exp = synth_experiment(dir.path(), 8, 1.0, true, cfg);
        let err = match train(&exp, None) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected divergence"),
        };
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn batch_of_one_skips_cutmix_without_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_trainer_config(1, 1, 23);
        let exp = synth_experiment(dir.path(), 4, 0.5, false, cfg);
        train(&exp, None).unwrap();
    }

    #[test]
    fn mse_consistency_route_trains() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_trainer_config(1, 4, 29);
        cfg.consistency = ConsistencyKind::Mse;
        let exp = synth_experiment(dir.path(), 12, 0.5, false, cfg);
        let outcome = train(&exp, None).unwrap();
        assert!(outcome.state.history[0].loss_cons > 0.0);
    }

    #[test]
    fn evaluate_writes_metrics_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_trainer_config(1, 4, 31);
        let exp = synth_experiment(dir.path(), 8, 1.0, true, cfg);
        let outcome = train(&exp, None).unwrap();
        let out = dir.path().join("eval_out");
        let report = evaluate(&exp, &outcome.final_checkpoint, &out).unwrap();
        assert_eq!(report.per_class.len(), 2);
        for file in ["metrics.csv", "confusion.csv", "confusion_log.csv"] {
            assert!(out.join(file).is_file(), "{file} missing");
        }
        assert!(out.join("images/confidence_0000.png").is_file());
        assert!(out.join("images/overlay_0000.png").is_file());
    }
}
