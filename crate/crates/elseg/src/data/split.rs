//! Deterministic labeled/unlabeled splits at whole-image granularity.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Partition `pairs` into a labeled subset of `round(fraction * n)` pairs and
/// an unlabeled remainder whose masks are discarded.
///
/// The same `(pairs, fraction, seed)` always produces the same partition.
pub fn split_labeled_unlabeled(
    pairs: &[(PathBuf, PathBuf)],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<(PathBuf, PathBuf)>, Vec<PathBuf>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n_labeled = (fraction * pairs.len() as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {} pairs rounds to zero labeled images",
            pairs.len()
        )));
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let labeled = order[..n_labeled]
        .iter()
        .map(|&i| pairs[i].clone())
        .collect();
    let unlabeled = order[n_labeled..]
        .iter()
        .map(|&i| pairs[i].0.clone())
        .collect();
    Ok((labeled, unlabeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pairs(n: usize) -> Vec<(PathBuf, PathBuf)> {
        (0..n)
            .map(|i| (PathBuf::from(format!("i{i}.png")), PathBuf::from(format!("m{i}.png"))))
            .collect()
    }

    #[test]
    fn twenty_percent_of_hundred() {
        let p = pairs(100);
        let (l, u) = split_labeled_unlabeled(&p, 0.2, 7).unwrap();
        assert_eq!(l.len(), 20);
        assert_eq!(u.len(), 80);
        let labeled: HashSet<_> = l.iter().map(|(img, _)| img.clone()).collect();
        assert!(u.iter().all(|img| !labeled.contains(img)));
    }

    #[test]
    fn full_fraction_keeps_everything_labeled() {
        let p = pairs(9);
        let (l, u) = split_labeled_unlabeled(&p, 1.0, 3).unwrap();
        assert_eq!(l.len(), 9);
        assert!(u.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_split() {
        let p = pairs(57);
        let a = split_labeled_unlabeled(&p, 0.3, 11).unwrap();
        let b = split_labeled_unlabeled(&p, 0.3, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_gives_different_split() {
        let p = pairs(100);
        let a = split_labeled_unlabeled(&p, 0.2, 1).unwrap();
        let b = split_labeled_unlabeled(&p, 0.2, 2).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn partition_is_exhaustive() {
        let p = pairs(31);
        let (l, u) = split_labeled_unlabeled(&p, 0.4, 5).unwrap();
        let mut seen: HashSet<PathBuf> = l.into_iter().map(|(img, _)| img).collect();
        seen.extend(u);
        assert_eq!(seen.len(), 31);
    }

    #[test]
    fn out_of_range_fraction_rejected() {
        let p = pairs(10);
        assert!(split_labeled_unlabeled(&p, 0.0, 0).is_err());
        assert!(split_labeled_unlabeled(&p, 1.5, 0).is_err());
    }

    #[test]
    fn zero_rounded_labeled_count_rejected() {
        let p = pairs(2);
        assert!(split_labeled_unlabeled(&p, 0.1, 0).is_err());
    }
}
