//! Property tests for the module-level invariants.

use std::path::PathBuf;

use ndarray::{Array2, Array4};
use proptest::prelude::*;

use elseg::augment::{denormalize, normalize, NormalizationConstants};
use elseg::data::split_labeled_unlabeled;
use elseg::eval::{f1, iou, precision, recall, ConfusionMatrix};
use elseg::loss::softmax_per_pixel;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// normalize is affine and invertible: the round-trip error stays below
    /// 1e-6 for any pixels in [0,1] and any positive constants.
    #[test]
    fn normalize_roundtrip(
        pixels in proptest::collection::vec(0.0f64..=1.0, 48),
        mean in proptest::array::uniform3(-1.0f64..1.0),
        std in proptest::array::uniform3(0.05f64..4.0),
    ) {
        let constants = NormalizationConstants { mean, std };
        let batch = Array4::from_shape_vec((1, 3, 4, 4), pixels).unwrap();
        let back = denormalize(&normalize(&batch.view(), &constants).view(), &constants);
        for (a, b) in batch.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    /// The labeled/unlabeled split partitions its input exactly.
    #[test]
    fn split_partitions_exactly(n in 1usize..200, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
        let pairs: Vec<(PathBuf, PathBuf)> = (0..n)
            .map(|i| (PathBuf::from(format!("i{i}")), PathBuf::from(format!("m{i}"))))
            .collect();
        let expected = (fraction * n as f64).round() as usize;
        match split_labeled_unlabeled(&pairs, fraction, seed) {
            Err(_) => prop_assert_eq!(expected, 0),
            Ok((labeled, unlabeled)) => {
                prop_assert_eq!(labeled.len(), expected);
                prop_assert_eq!(labeled.len() + unlabeled.len(), n);
                let mut all: Vec<PathBuf> = labeled.into_iter().map(|(img, _)| img).collect();
                all.extend(unlabeled);
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), n);
            }
        }
    }

    /// Per-pixel softmax is a probability distribution for any finite logits.
    #[test]
    fn softmax_is_a_distribution(values in proptest::collection::vec(-50.0f64..50.0, 3 * 16)) {
        let logits = Array4::from_shape_vec((1, 3, 4, 4), values).unwrap();
        let probs = softmax_per_pixel(&logits.view());
        for y in 0..4 {
            for x in 0..4 {
                let sum: f64 = (0..3).map(|c| probs[(0, c, y, x)]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for c in 0..3 {
                    prop_assert!(probs[(0, c, y, x)] >= 0.0);
                }
            }
        }
    }

    /// On any mask pair: IoU <= precision, IoU <= recall, and
    /// F1 = 2*IoU/(1+IoU) per class.
    #[test]
    fn confusion_metric_relations(
        pred in proptest::collection::vec(0u8..4, 64),
        truth in proptest::collection::vec(0u8..4, 64),
    ) {
        let pred = Array2::from_shape_vec((8, 8), pred).unwrap();
        let truth = Array2::from_shape_vec((8, 8), truth).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred.view(), &truth.view()).unwrap();
        for class in 0..4 {
            let i = iou(&cm, class);
            let p = precision(&cm, class);
            let r = recall(&cm, class);
            prop_assert!(i <= p + 1e-12);
            prop_assert!(i <= r + 1e-12);
            prop_assert!((f1(p, r) - 2.0 * i / (1.0 + i)).abs() < 1e-9);
        }
    }
}
