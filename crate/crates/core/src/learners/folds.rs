use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fold index for every member, in member order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Stratified k-fold split.
///
/// Each class is shuffled with a ChaCha8 stream seeded by `seed`, cases first and
/// then controls are dealt round-robin, with the control deal continuing where
/// the case deal stopped so fold sizes differ by at most one.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::invalid(format!("{} members cannot fill {k} folds", labels.len())));
    }
    let mut cases: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut controls: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases.shuffle(&mut rng);
    controls.shuffle(&mut rng);
    let mut folds = vec![0; labels.len()];
    for (pos, &i) in cases.iter().chain(controls.iter()).enumerate() {
        folds[i] = pos % k;
    }
    Ok(FoldAssignment { k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(labels: &[bool], a: &FoldAssignment) -> Vec<(usize, usize)> {
        (0..a.k)
            .map(|f| {
                let idx = a.test_indices(f);
                let cases = idx.iter().filter(|&&i| labels[i]).count();
                (cases, idx.len() - cases)
            })
            .collect()
    }

    #[test]
    fn exact_divisibility() {
        let labels: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let a = stratified_kfold(&labels, 5, 1).unwrap();
        assert!(counts(&labels, &a).iter().all(|&c| c == (2, 18)));
    }

    #[test]
    fn remainder_distribution() {
        let labels: Vec<bool> = (0..50).map(|i| i < 7).collect();
        let a = stratified_kfold(&labels, 5, 1).unwrap();
        let cases: Vec<usize> = counts(&labels, &a).iter().map(|c| c.0).collect();
        assert_eq!(cases, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn minimal_two_member_split() {
        let a = stratified_kfold(&[true, false], 2, 0).unwrap();
        assert_eq!(a.folds, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(stratified_kfold(&[true, false], 1, 0).is_err());
        assert!(matches!(stratified_kfold(&[true, true, true], 2, 0), Err(Error::DegenerateLabels)));
        assert!(stratified_kfold(&[true, false], 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn stratification_and_determinism(labels in prop::collection::vec(any::<bool>(), 2..300), k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(labels.len() >= k && labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = stratified_kfold(&labels, k, seed).unwrap();
            let b = stratified_kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let total_pos = labels.iter().filter(|&&l| l).count();
            let n = labels.len();
            for (cases, controls) in counts(&labels, &a) {
                prop_assert!(cases == total_pos / k || cases == total_pos / k + 1);
                let size = cases + controls;
                prop_assert!(size == n / k || size == n / k + 1);
            }
        }
    }
}
