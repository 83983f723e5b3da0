//! Training losses: supervised cross-entropy, the thresholded semi
//! cross-entropy consistency terms, and an MSE consistency baseline.
//!
//! Logits are `(B, C', H, W)` with `C' = C + 1` classes including background;
//! targets are `(B, H, W)` class indices with [`IGNORE_LABEL`] excluded from
//! every reduction. All losses are differentiated analytically with respect
//! to the student logits; teacher outputs are plain data and never receive
//! gradients.
//!
//! The positive term averages `-log softmax(z)[pseudo]` over pixels whose
//! teacher confidence reaches `t_pos`. The negative term re-normalizes the
//! negated logits, `q = softmax(-z)`, and averages `-log q[c]` over every
//! (pixel, class) pair where the teacher assigns class `c` probability at
//! most `t_neg` and `c` is not the pseudo-label. Both terms return 0 when
//! nothing is selected.
//!
//! Reductions run in a fixed index order, so values are reproducible across
//! runs and independent of the thread count.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::catalog::IGNORE_LABEL;
use crate::error::{Error, Result};

/// Thresholds and weighting for the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiCEConfig {
    /// Teacher-confidence threshold gating the positive term.
    pub t_pos: f64,
    /// Teacher-probability ceiling gating the negative term.
    pub t_neg: f64,
    /// Weight of the consistency loss in the total objective.
    pub lambda_consistency: f64,
    /// Denominator convention for both terms.
    pub mean_over: MeanOver,
}

/// What the semi cross-entropy terms divide by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanOver {
    /// Count of selected pixels / pairs (default).
    Selected,
    /// Count of all candidate pixels / pairs, selected or not.
    All,
}

impl Default for SemiCEConfig {
    fn default() -> Self {
        SemiCEConfig {
            t_pos: 0.2,
            t_neg: 0.4,
            lambda_consistency: 1.5,
            mean_over: MeanOver::Selected,
        }
    }
}

impl SemiCEConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_pos", self.t_pos), ("t_neg", self.t_neg)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.lambda_consistency < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_consistency must be non-negative, got {}",
                self.lambda_consistency
            )));
        }
        Ok(())
    }
}

/// Teacher predictions distilled into per-pixel training targets.
#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    /// Per-pixel argmax class, ties broken toward the lowest index.
    pub labels: Array3<u8>,
    /// Per-pixel max softmax probability.
    pub confidence: Array3<f64>,
    /// Full per-pixel class distribution `(B, C', H, W)`.
    pub class_probs: Array4<f64>,
}

impl PseudoLabelBatch {
    pub fn batch(&self) -> usize {
        self.class_probs.shape()[0]
    }

    /// Concatenate along the batch axis.
    pub fn concat(parts: &[&PseudoLabelBatch]) -> Result<PseudoLabelBatch> {
        let labels: Vec<ArrayView3<u8>> = parts.iter().map(|p| p.labels.view()).collect();
        let confidence: Vec<ArrayView3<f64>> = parts.iter().map(|p| p.confidence.view()).collect();
        let probs: Vec<ArrayView4<f64>> = parts.iter().map(|p| p.class_probs.view()).collect();
        fn join(msg: &'static str) -> impl Fn(ndarray::ShapeError) -> Error {
            move |_| Error::Shape(format!("pseudo-label concat: {msg}"))
        }
        Ok(PseudoLabelBatch {
            labels: ndarray::concatenate(ndarray::Axis(0), &labels).map_err(join("labels"))?,
            confidence: ndarray::concatenate(ndarray::Axis(0), &confidence)
                .map_err(join("confidence"))?,
            class_probs: ndarray::concatenate(ndarray::Axis(0), &probs).map_err(join("probs"))?,
        })
    }
}

fn check_logits_targets(logits: &ArrayView4<f64>, targets: &ArrayView3<u8>) -> Result<()> {
    let (b, c, h, w) = logits.dim();
    if targets.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    for &t in targets.iter() {
        if t != IGNORE_LABEL && (t as usize) >= c {
            return Err(Error::Shape(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
    }
    Ok(())
}

/// `-ln(p)` with an underflow floor that still propagates NaN, so a
/// diverged model surfaces as a non-finite loss instead of a silent clamp.
fn neg_ln(p: f64) -> f64 {
    if p.is_nan() {
        f64::NAN
    } else {
        -p.max(f64::MIN_POSITIVE).ln()
    }
}

/// Per-pixel softmax over the class axis, stabilized by max subtraction.
pub fn softmax_per_pixel(logits: &ArrayView4<f64>) -> Array4<f64> {
    let (b, c, h, w) = logits.dim();
    let hw = h * w;
    let logits = logits.as_standard_layout();
    let ls = logits.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    let os = out.as_slice_mut().expect("freshly allocated");
    let mut acc = vec![0.0f64; hw];
    for bi in 0..b {
        let base = bi * c * hw;
        // per-pixel max over classes
        acc.copy_from_slice(&ls[base..base + hw]);
        for ci in 1..c {
            for (m, &v) in acc.iter_mut().zip(&ls[base + ci * hw..base + (ci + 1) * hw]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        // exponentials
        for ci in 0..c {
            let src = &ls[base + ci * hw..base + (ci + 1) * hw];
            let dst = &mut os[base + ci * hw..base + (ci + 1) * hw];
            for ((d, &v), &m) in dst.iter_mut().zip(src).zip(acc.iter()) {
                *d = (v - m).exp();
            }
        }
        // normalize
        let first = &os[base..base + hw];
        acc.copy_from_slice(first);
        for ci in 1..c {
            for (s, &v) in acc.iter_mut().zip(&os[base + ci * hw..base + (ci + 1) * hw]) {
                *s += v;
            }
        }
        for s in acc.iter_mut() {
            *s = 1.0 / *s;
        }
        for ci in 0..c {
            for (d, &inv) in os[base + ci * hw..base + (ci + 1) * hw].iter_mut().zip(acc.iter()) {
                *d *= inv;
            }
        }
    }
    out
}

/// Per-pixel `-log softmax(logits)[target]`, averaged over non-ignored
/// pixels, with its gradient with respect to the logits.
pub fn supervised_ce_with_grad(
    logits: &ArrayView4<f64>,
    targets: &ArrayView3<u8>,
) -> Result<(f64, Array4<f64>)> {
    check_logits_targets(logits, targets)?;
    let (b, c, h, w) = logits.dim();
    let probs = softmax_per_pixel(logits);
    let mut grad = Array4::<f64>::zeros((b, c, h, w));

    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = targets[(bi, y, x)];
                if t == IGNORE_LABEL {
                    continue;
                }
                total += neg_ln(probs[(bi, t as usize, y, x)]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "supervised cross-entropy over a batch with every pixel ignored".into(),
        ));
    }
    let inv = 1.0 / count as f64;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = targets[(bi, y, x)];
                if t == IGNORE_LABEL {
                    continue;
                }
                for ci in 0..c {
                    let delta = if ci == t as usize { 1.0 } else { 0.0 };
                    grad[(bi, ci, y, x)] = (probs[(bi, ci, y, x)] - delta) * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean `-log softmax(logits)[target]` over non-ignored pixels.
pub fn supervised_ce(logits: &ArrayView4<f64>, targets: &ArrayView3<u8>) -> Result<f64> {
    supervised_ce_with_grad(logits, targets).map(|(v, _)| v)
}

/// Distill teacher logits into argmax labels, confidences, and the full
/// class distribution. No gradient information is retained.
pub fn make_pseudo_labels(teacher_logits: &ArrayView4<f64>) -> PseudoLabelBatch {
    let (b, c, h, w) = teacher_logits.dim();
    let class_probs = softmax_per_pixel(teacher_logits);
    let mut labels = Array3::<u8>::zeros((b, h, w));
    let mut confidence = Array3::<f64>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_p = class_probs[(bi, 0, y, x)];
                for ci in 1..c {
                    let p = class_probs[(bi, ci, y, x)];
                    if p > best_p {
                        best = ci;
                        best_p = p;
                    }
                }
                labels[(bi, y, x)] = best as u8;
                confidence[(bi, y, x)] = best_p;
            }
        }
    }
    PseudoLabelBatch {
        labels,
        confidence,
        class_probs,
    }
}

/// Pixels whose teacher confidence reaches `t_pos`.
pub fn positive_mask(pseudo: &PseudoLabelBatch, t_pos: f64) -> Array3<bool> {
    pseudo.confidence.mapv(|c| c >= t_pos)
}

/// (pixel, class) pairs where the teacher assigns at most `t_neg` probability
/// and the class is not the pseudo-label. Empty when `t_neg <= 0`.
pub fn negative_pair_mask(pseudo: &PseudoLabelBatch, t_neg: f64) -> Array4<bool> {
    let (b, c, h, w) = pseudo.class_probs.dim();
    let mut mask = Array4::<bool>::from_elem((b, c, h, w), false);
    if t_neg <= 0.0 {
        return mask;
    }
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let label = pseudo.labels[(bi, y, x)] as usize;
                for ci in 0..c {
                    if ci != label && pseudo.class_probs[(bi, ci, y, x)] <= t_neg {
                        mask[(bi, ci, y, x)] = true;
                    }
                }
            }
        }
    }
    mask
}

pub(crate) fn semice_positive_impl(
    student_logits: &ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    t_pos: f64,
    mean_over: MeanOver,
) -> Result<(f64, Array4<f64>)> {
    check_logits_targets(student_logits, &pseudo.labels.view())?;
    let (b, c, h, w) = student_logits.dim();
    let probs = softmax_per_pixel(student_logits);
    let selected = positive_mask(pseudo, t_pos);
    let mut grad = Array4::<f64>::zeros((b, c, h, w));

    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if !selected[(bi, y, x)] {
                    continue;
                }
                let t = pseudo.labels[(bi, y, x)] as usize;
                total += neg_ln(probs[(bi, t, y, x)]);
                count += 1;
            }
        }
    }
    let denom = match mean_over {
        MeanOver::Selected => count,
        MeanOver::All => b * h * w,
    };
    if count == 0 || denom == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / denom as f64;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if !selected[(bi, y, x)] {
                    continue;
                }
                let t = pseudo.labels[(bi, y, x)] as usize;
                for ci in 0..c {
                    let delta = if ci == t { 1.0 } else { 0.0 };
                    grad[(bi, ci, y, x)] = (probs[(bi, ci, y, x)] - delta) * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

pub(crate) fn semice_negative_impl(
    student_logits: &ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    t_neg: f64,
    mean_over: MeanOver,
) -> Result<(f64, Array4<f64>)> {
    check_logits_targets(student_logits, &pseudo.labels.view())?;
    let (b, c, h, w) = student_logits.dim();
    let mut grad = Array4::<f64>::zeros((b, c, h, w));
    if t_neg <= 0.0 {
        return Ok((0.0, grad));
    }
    // softmax of the negated logits
    let neg_logits = student_logits.mapv(|z| -z);
    let q = softmax_per_pixel(&neg_logits.view());
    let pairs = negative_pair_mask(pseudo, t_neg);

    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    if pairs[(bi, ci, y, x)] {
                        total += neg_ln(q[(bi, ci, y, x)]);
                        count += 1;
                    }
                }
            }
        }
    }
    let denom = match mean_over {
        MeanOver::Selected => count,
        MeanOver::All => b * h * w * (c.saturating_sub(1)).max(1),
    };
    if count == 0 || denom == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / denom as f64;
    // d(-log q[c])/dz_k = delta_kc - q_k, summed over selected classes
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut n_sel = 0usize;
                for ci in 0..c {
                    if pairs[(bi, ci, y, x)] {
                        n_sel += 1;
                    }
                }
                if n_sel == 0 {
                    continue;
                }
                for k in 0..c {
                    let indicator = if pairs[(bi, k, y, x)] { 1.0 } else { 0.0 };
                    grad[(bi, k, y, x)] = (indicator - n_sel as f64 * q[(bi, k, y, x)]) * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

/// Positive semi cross-entropy term with its student-logit gradient.
pub fn semice_positive_with_grad(
    student_logits: &ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    t_pos: f64,
) -> Result<(f64, Array4<f64>)> {
    semice_positive_impl(student_logits, pseudo, t_pos, MeanOver::Selected)
}

/// Positive semi cross-entropy term (value only).
pub fn semice_positive(
    student_logits: &ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    t_pos: f64,
) -> Result<f64> {
    semice_positive_with_grad(student_logits, pseudo, t_pos).map(|(v, _)| v)
}

/// Negative semi cross-entropy term with its student-logit gradient.
pub fn semice_negative_with_grad(
    student_logits: &ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    t_neg: f64,
) -> Result<(f64, Array4<f64>)> {
    semice_negative_impl(student_logits, pseudo, t_neg, MeanOver::Selected)
}

/// Negative semi cross-entropy term (value only).
pub fn semice_negative(
    student_logits: &ArrayView4<f64>,
    pseudo: &PseudoLabelBatch,
    t_neg: f64,
) -> Result<f64> {
    semice_negative_with_grad(student_logits, pseudo, t_neg).map(|(v, _)| v)
}

/// Semi cross-entropy consistency over the concatenated labeled and
/// unlabeled student streams, with per-stream gradients.
///
/// Both terms select and average across the concatenation, so a pixel in
/// either stream contributes with identical weight.
pub fn consistency_loss_with_grad(
    student_logits_l: &ArrayView4<f64>,
    student_logits_u: &ArrayView4<f64>,
    teacher_pseudo_l: &PseudoLabelBatch,
    teacher_pseudo_u: &PseudoLabelBatch,
    cfg: &SemiCEConfig,
) -> Result<(f64, Array4<f64>, Array4<f64>)> {
    let joined = ndarray::concatenate(
        ndarray::Axis(0),
        &[student_logits_l.view(), student_logits_u.view()],
    )
    .map_err(|_| Error::Shape("labeled/unlabeled student logits disagree".into()))?;
    let pseudo = PseudoLabelBatch::concat(&[teacher_pseudo_l, teacher_pseudo_u])?;

    let (pos, grad_pos) = semice_positive_impl(&joined.view(), &pseudo, cfg.t_pos, cfg.mean_over)?;
    let (neg, grad_neg) = semice_negative_impl(&joined.view(), &pseudo, cfg.t_neg, cfg.mean_over)?;

    let grad = grad_pos + grad_neg;
    let b_l = student_logits_l.shape()[0];
    let grad_l = grad.slice(ndarray::s![..b_l, .., .., ..]).to_owned();
    let grad_u = grad.slice(ndarray::s![b_l.., .., .., ..]).to_owned();
    Ok((pos + neg, grad_l, grad_u))
}

/// Semi cross-entropy consistency (value only).
pub fn consistency_loss(
    student_logits_l: &ArrayView4<f64>,
    student_logits_u: &ArrayView4<f64>,
    teacher_pseudo_l: &PseudoLabelBatch,
    teacher_pseudo_u: &PseudoLabelBatch,
    cfg: &SemiCEConfig,
) -> Result<f64> {
    consistency_loss_with_grad(
        student_logits_l,
        student_logits_u,
        teacher_pseudo_l,
        teacher_pseudo_u,
        cfg,
    )
    .map(|(v, _, _)| v)
}

/// Weighted objective: `sup + lambda * cons`.
pub fn total_loss(sup: f64, cons: f64, lambda: f64) -> f64 {
    sup + lambda * cons
}

/// Mean squared difference between two per-pixel probability fields.
pub fn mse_consistency(
    student_probs: &ArrayView4<f64>,
    teacher_probs: &ArrayView4<f64>,
) -> Result<f64> {
    if student_probs.dim() != teacher_probs.dim() {
        return Err(Error::Shape(format!(
            "probability fields disagree: {:?} vs {:?}",
            student_probs.shape(),
            teacher_probs.shape()
        )));
    }
    let n = student_probs.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, t) in student_probs.iter().zip(teacher_probs.iter()) {
        let d = s - t;
        total += d * d;
    }
    Ok(total / n as f64)
}

/// MSE consistency evaluated from student logits (softmax applied
/// internally), with the gradient with respect to those logits.
pub fn mse_consistency_with_grad(
    student_logits: &ArrayView4<f64>,
    teacher_probs: &ArrayView4<f64>,
) -> Result<(f64, Array4<f64>)> {
    if student_logits.dim() != teacher_probs.dim() {
        return Err(Error::Shape(format!(
            "logits vs teacher probabilities disagree: {:?} vs {:?}",
            student_logits.shape(),
            teacher_probs.shape()
        )));
    }
    let (b, c, h, w) = student_logits.dim();
    let probs = softmax_per_pixel(student_logits);
    let value = mse_consistency(&probs.view(), teacher_probs)?;
    let n = probs.len() as f64;

    // dL/dz_k = (2/n) p_k [(p_k - t_k) - sum_c (p_c - t_c) p_c]
    let mut grad = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for ci in 0..c {
                    let p = probs[(bi, ci, y, x)];
                    dot += (p - teacher_probs[(bi, ci, y, x)]) * p;
                }
                for k in 0..c {
                    let p = probs[(bi, k, y, x)];
                    grad[(bi, k, y, x)] =
                        2.0 / n * p * ((p - teacher_probs[(bi, k, y, x)]) - dot);
                }
            }
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-3.0..3.0))
    }

    fn random_targets(shape: (usize, usize, usize), classes: usize, seed: u64) -> Array3<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(0..classes) as u8)
    }

    /// Independent elementwise oracle for the mean of -log p[target].
    fn ce_oracle(logits: &Array4<f64>, targets: &Array3<u8>) -> f64 {
        let (b, c, h, w) = logits.dim();
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let t = targets[(bi, y, x)];
                    if t == IGNORE_LABEL {
                        continue;
                    }
                    let mut denom = 0.0;
                    for ci in 0..c {
                        denom += logits[(bi, ci, y, x)].exp();
                    }
                    let p = logits[(bi, t as usize, y, x)].exp() / denom;
                    total += -p.ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn softmax_uniform_gives_quarter() {
        let logits = Array4::from_elem((1, 4, 2, 2), 1.7);
        let p = softmax_per_pixel(&logits.view());
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut logits = Array4::from_elem((1, 4, 1, 1), 0.0);
        logits[(0, 0, 0, 0)] = 1000.0;
        let p = softmax_per_pixel(&logits.view());
        assert!(p[(0, 0, 0, 0)] > 0.999);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_sums_to_one() {
        let logits = random_logits((2, 5, 4, 4), 3);
        let p = softmax_per_pixel(&logits.view());
        for bi in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let s: f64 = (0..5).map(|c| p[(bi, c, y, x)]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn uniform_logits_cost_ln4() {
        let logits = Array4::from_elem((2, 4, 3, 3), 0.3);
        let targets = random_targets((2, 3, 3), 4, 5);
        let v = supervised_ce(&logits.view(), &targets.view()).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn peaked_logits_cost_near_zero() {
        let targets = random_targets((1, 4, 4), 3, 7);
        let mut logits = Array4::from_elem((1, 3, 4, 4), 0.0);
        for y in 0..4 {
            for x in 0..4 {
                logits[(0, targets[(0, y, x)] as usize, y, x)] = 50.0;
            }
        }
        let v = supervised_ce(&logits.view(), &targets.view()).unwrap();
        assert!(v < 1e-9, "{v}");
    }

    #[test]
    fn supervised_ce_matches_pixel_loop() {
        let logits = random_logits((2, 4, 8, 8), 11);
        let targets = random_targets((2, 8, 8), 4, 13);
        let v = supervised_ce(&logits.view(), &targets.view()).unwrap();
        assert!((v - ce_oracle(&logits, &targets)).abs() < 1e-9);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let logits = random_logits((1, 3, 4, 4), 17);
        let mut targets = random_targets((1, 4, 4), 3, 19);
        targets[(0, 0, 0)] = IGNORE_LABEL;
        let v = supervised_ce(&logits.view(), &targets.view()).unwrap();
        assert!((v - ce_oracle(&logits, &targets)).abs() < 1e-9);

        let all_ignored = Array3::from_elem((1, 4, 4), IGNORE_LABEL);
        assert!(supervised_ce(&logits.view(), &all_ignored.view()).is_err());
    }

    #[test]
    fn pseudo_labels_match_argmax_oracle() {
        let logits = random_logits((2, 5, 6, 6), 23);
        let pseudo = make_pseudo_labels(&logits.view());
        let probs = softmax_per_pixel(&logits.view());
        for bi in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    let mut best = 0;
                    for c in 1..5 {
                        if logits[(bi, c, y, x)] > logits[(bi, best, y, x)] {
                            best = c;
                        }
                    }
                    assert_eq!(pseudo.labels[(bi, y, x)] as usize, best);
                    assert!(
                        (pseudo.confidence[(bi, y, x)] - probs[(bi, best, y, x)]).abs() < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn pseudo_label_ties_take_lowest_index() {
        let logits = Array4::from_elem((1, 4, 2, 2), 0.5);
        let pseudo = make_pseudo_labels(&logits.view());
        assert!(pseudo.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn pseudo_probs_sum_to_one() {
        let logits = random_logits((1, 4, 5, 5), 29);
        let pseudo = make_pseudo_labels(&logits.view());
        for y in 0..5 {
            for x in 0..5 {
                let s: f64 = (0..4).map(|c| pseudo.class_probs[(0, c, y, x)]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn positive_with_zero_threshold_equals_supervised_ce() {
        let student = random_logits((2, 4, 6, 6), 31);
        let teacher = random_logits((2, 4, 6, 6), 37);
        let pseudo = make_pseudo_labels(&teacher.view());
        let a = semice_positive(&student.view(), &pseudo, 0.0).unwrap();
        let b = supervised_ce(&student.view(), &pseudo.labels.view()).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn positive_empty_selection_returns_zero() {
        let student = random_logits((1, 4, 4, 4), 41);
        let teacher = Array4::from_elem((1, 4, 4, 4), 0.0); // confidence 0.25 everywhere
        let pseudo = make_pseudo_labels(&teacher.view());
        let (v, g) = semice_positive_with_grad(&student.view(), &pseudo, 0.9).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positive_matches_masked_pixel_loop() {
        let student = random_logits((2, 3, 4, 4), 43);
        let teacher = random_logits((2, 3, 4, 4), 47);
        let pseudo = make_pseudo_labels(&teacher.view());
        let t_pos = 0.6;
        let v = semice_positive(&student.view(), &pseudo, t_pos).unwrap();

        let probs = softmax_per_pixel(&student.view());
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    if pseudo.confidence[(bi, y, x)] >= t_pos {
                        total += -probs[(bi, pseudo.labels[(bi, y, x)] as usize, y, x)].ln();
                        count += 1;
                    }
                }
            }
        }
        assert!(count > 0 && count < 32, "mixed case wanted, got {count}");
        assert!((v - total / count as f64).abs() < 1e-9);
    }

    #[test]
    fn negative_zero_threshold_is_exactly_zero() {
        let student = random_logits((2, 4, 4, 4), 53);
        let teacher = random_logits((2, 4, 4, 4), 59);
        let pseudo = make_pseudo_labels(&teacher.view());
        let (v, g) = semice_negative_with_grad(&student.view(), &pseudo, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_two_class_hand_computation() {
        // teacher certain of class 0 at every pixel
        let mut teacher = Array4::from_elem((1, 2, 2, 2), 0.0);
        for y in 0..2 {
            for x in 0..2 {
                teacher[(0, 0, y, x)] = 60.0;
            }
        }
        let pseudo = make_pseudo_labels(&teacher.view());
        let student = random_logits((1, 2, 2, 2), 61);
        let v = semice_negative(&student.view(), &pseudo, 0.4).unwrap();

        let neg = student.mapv(|z| -z);
        let q = softmax_per_pixel(&neg.view());
        let mut expected = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                expected += -q[(0, 1, y, x)].ln();
            }
        }
        expected /= 4.0;
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }

    #[test]
    fn negative_matches_exhaustive_pair_loop() {
        let student = random_logits((2, 4, 4, 4), 67);
        let teacher = random_logits((2, 4, 4, 4), 71);
        let pseudo = make_pseudo_labels(&teacher.view());
        let t_neg = 0.4;
        let v = semice_negative(&student.view(), &pseudo, t_neg).unwrap();

        let neg = student.mapv(|z| -z);
        let q = softmax_per_pixel(&neg.view());
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..4 {
                        if c != pseudo.labels[(bi, y, x)] as usize
                            && pseudo.class_probs[(bi, c, y, x)] <= t_neg
                        {
                            total += -q[(bi, c, y, x)].ln();
                            count += 1;
                        }
                    }
                }
            }
        }
        assert!(count > 0);
        assert!((v - total / count as f64).abs() < 1e-9);
    }

    #[test]
    fn consistency_is_sum_of_both_terms_over_concatenation() {
        let s_l = random_logits((2, 4, 4, 4), 73);
        let s_u = random_logits((3, 4, 4, 4), 79);
        let t_l = make_pseudo_labels(&random_logits((2, 4, 4, 4), 83).view());
        let t_u = make_pseudo_labels(&random_logits((3, 4, 4, 4), 89).view());
        let cfg = SemiCEConfig {
            t_pos: 0.2,
            t_neg: 0.4,
            ..SemiCEConfig::default()
        };
        let v = consistency_loss(&s_l.view(), &s_u.view(), &t_l, &t_u, &cfg).unwrap();

        let joined = ndarray::concatenate(ndarray::Axis(0), &[s_l.view(), s_u.view()]).unwrap();
        let pseudo = PseudoLabelBatch::concat(&[&t_l, &t_u]).unwrap();
        let pos = semice_positive(&joined.view(), &pseudo, cfg.t_pos).unwrap();
        let neg = semice_negative(&joined.view(), &pseudo, cfg.t_neg).unwrap();
        assert!((v - (pos + neg)).abs() < 1e-12);
    }

    #[test]
    fn consistency_both_terms_empty_is_zero() {
        let s = random_logits((1, 4, 4, 4), 97);
        let teacher = Array4::from_elem((1, 4, 4, 4), 0.0);
        let pseudo = make_pseudo_labels(&teacher.view());
        let cfg = SemiCEConfig {
            t_pos: 1.01, // nothing reaches it
            t_neg: 0.0,
            ..SemiCEConfig::default()
        };
        let v = consistency_loss(&s.view(), &s.view(), &pseudo, &pseudo, &cfg).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn agreement_case_is_near_minimum() {
        // one-hot-like logits with a guaranteed margin of 12
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut logits = Array4::<f64>::zeros((1, 4, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                logits[(0, rng.gen_range(0..4), y, x)] = 12.0;
            }
        }
        let pseudo = make_pseudo_labels(&logits.view());
        let cfg = SemiCEConfig {
            t_pos: 0.2,
            t_neg: 0.0,
            ..SemiCEConfig::default()
        };
        let v = consistency_loss(&logits.view(), &logits.view(), &pseudo, &pseudo, &cfg).unwrap();
        assert!(v < 1e-3, "agreement should be near zero, got {v}");
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 1.5), 4.0);
        assert_eq!(total_loss(0.7, 9.0, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 3.0, 2.0), 6.0);
    }

    #[test]
    fn mse_identity_and_arithmetic() {
        let p = softmax_per_pixel(&random_logits((1, 2, 3, 3), 103).view());
        assert_eq!(mse_consistency(&p.view(), &p.view()).unwrap(), 0.0);

        let mut a = Array4::zeros((1, 2, 1, 1));
        a[(0, 0, 0, 0)] = 1.0;
        let mut b = Array4::zeros((1, 2, 1, 1));
        b[(0, 1, 0, 0)] = 1.0;
        assert!((mse_consistency(&a.view(), &b.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_elementwise_oracle() {
        let a = softmax_per_pixel(&random_logits((2, 3, 4, 4), 107).view());
        let b = softmax_per_pixel(&random_logits((2, 3, 4, 4), 109).view());
        let v = mse_consistency(&a.view(), &b.view()).unwrap();
        let mut total = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            total += (x - y) * (x - y);
        }
        assert!((v - total / a.len() as f64).abs() < 1e-12);

        let wrong = Array4::<f64>::zeros((2, 3, 4, 5));
        assert!(mse_consistency(&a.view(), &wrong.view()).is_err());
    }

    #[test]
    fn raising_t_pos_never_grows_selection() {
        let teacher = random_logits((2, 4, 8, 8), 113);
        let pseudo = make_pseudo_labels(&teacher.view());
        let grid = [0.0, 0.2, 0.3, 0.4, 0.5, 0.6];
        for pair in grid.windows(2) {
            let low = positive_mask(&pseudo, pair[0]);
            let high = positive_mask(&pseudo, pair[1]);
            for (l, h) in low.iter().zip(high.iter()) {
                assert!(*l || !*h, "selection must shrink as t_pos rises");
            }
        }
    }

    #[test]
    fn raising_t_neg_never_shrinks_selection() {
        let teacher = random_logits((2, 4, 8, 8), 127);
        let pseudo = make_pseudo_labels(&teacher.view());
        let grid = [0.0, 0.1, 0.2, 0.4, 0.6];
        for pair in grid.windows(2) {
            let low = negative_pair_mask(&pseudo, pair[0]);
            let high = negative_pair_mask(&pseudo, pair[1]);
            for (l, h) in low.iter().zip(high.iter()) {
                assert!(*h || !*l, "selection must grow as t_neg rises");
            }
        }
    }

    /// Central finite differences of `f` with respect to each logit.
    fn fd_grad(
        logits: &Array4<f64>,
        mut f: impl FnMut(&Array4<f64>) -> f64,
    ) -> Array4<f64> {
        let h = 1e-4;
        let mut grad = Array4::<f64>::zeros(logits.dim());
        let mut work = logits.clone();
        for idx in ndarray::indices(logits.dim()) {
            let orig = work[idx];
            work[idx] = orig + h;
            let up = f(&work);
            work[idx] = orig - h;
            let down = f(&work);
            work[idx] = orig;
            grad[idx] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn assert_grad_close(analytic: &Array4<f64>, numeric: &Array4<f64>) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let scale = a.abs().max(n.abs());
            if scale < 1e-9 {
                assert!((a - n).abs() < 1e-9, "{a} vs {n}");
            } else {
                assert!((a - n).abs() / scale < 1e-3, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn supervised_ce_gradient_matches_finite_differences() {
        let logits = random_logits((1, 3, 4, 4), 131);
        let targets = random_targets((1, 4, 4), 3, 137);
        let (_, g) = supervised_ce_with_grad(&logits.view(), &targets.view()).unwrap();
        let fd = fd_grad(&logits, |z| {
            supervised_ce(&z.view(), &targets.view()).unwrap()
        });
        assert_grad_close(&g, &fd);
    }

    #[test]
    fn semice_gradients_match_finite_differences() {
        let student = random_logits((1, 3, 4, 4), 139);
        let teacher = random_logits((1, 3, 4, 4), 149);
        let pseudo = make_pseudo_labels(&teacher.view());

        let (_, gp) = semice_positive_with_grad(&student.view(), &pseudo, 0.4).unwrap();
        let fdp = fd_grad(&student, |z| {
            semice_positive(&z.view(), &pseudo, 0.4).unwrap()
        });
        assert_grad_close(&gp, &fdp);

        let (_, gn) = semice_negative_with_grad(&student.view(), &pseudo, 0.4).unwrap();
        let fdn = fd_grad(&student, |z| {
            semice_negative(&z.view(), &pseudo, 0.4).unwrap()
        });
        assert_grad_close(&gn, &fdn);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let student = random_logits((1, 3, 3, 3), 151);
        let teacher = softmax_per_pixel(&random_logits((1, 3, 3, 3), 157).view());
        let (_, g) = mse_consistency_with_grad(&student.view(), &teacher.view()).unwrap();
        let fd = fd_grad(&student, |z| {
            let p = softmax_per_pixel(&z.view());
            mse_consistency(&p.view(), &teacher.view()).unwrap()
        });
        assert_grad_close(&g, &fd);
    }
}
