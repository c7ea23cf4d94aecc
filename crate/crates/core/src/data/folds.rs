//! Stratified k-fold assignment and per-fold train/valid/test splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.valid, self.test
            )));
        }
        if self.train == 0.0 {
            return Err(Error::config("train fraction must be > 0"));
        }
        Ok(())
    }
}

/// Bag indices for one cross-validation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Assigns each bag to one of `k` folds, stratified by bag label. Positives
/// and negatives are shuffled separately and dealt round-robin, so fold sizes
/// differ by at most one and so do the per-fold positive counts.
pub fn make_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    if labels.len() < k {
        return Err(Error::invalid(format!("{} bags cannot fill {k} folds", labels.len())));
    }
    let mut rng = keyed(seed, Stream::Split, "folds");
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        folds[i] = slot % k;
    }
    Ok(folds)
}

/// Test set is `fold`; the remaining bags are split into train and valid in
/// the ratio `train : valid`, again stratified by label.
pub fn fold_split(folds: &[usize], labels: &[bool], fold: usize, fractions: &SplitFractions, seed: u64) -> Result<FoldSplit> {
    fractions.validate()?;
    if folds.len() != labels.len() {
        return Err(Error::shape(format!("{} fold assignments", labels.len()), folds.len()));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    if fold >= k {
        return Err(Error::invalid(format!("fold {fold} out of range (k = {k})")));
    }
    let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == fold).collect();
    let mut rng = keyed(seed, Stream::Split, &format!("fold-{fold}"));
    let valid_share = fractions.valid / (fractions.train + fractions.valid);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for class in [true, false] {
        let mut rest: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != fold && labels[i] == class).collect();
        rest.shuffle(&mut rng);
        let n_valid = (rest.len() as f64 * valid_share).round() as usize;
        valid.extend_from_slice(&rest[..n_valid]);
        train.extend_from_slice(&rest[n_valid..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok(FoldSplit { fold, train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_bags_make_five_folds_of_twenty() {
        let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let folds = make_folds(&labels, 5, 11).unwrap();
        for f in 0..5 {
            assert_eq!(folds.iter().filter(|&&x| x == f).count(), 20);
        }
    }

    #[test]
    fn each_bag_is_tested_once_and_splits_are_disjoint() {
        let labels: Vec<bool> = (0..37).map(|i| i % 4 == 0).collect();
        let folds = make_folds(&labels, 5, 2).unwrap();
        let mut tested = vec![0; labels.len()];
        for f in 0..5 {
            let s = fold_split(&folds, &labels, f, &SplitFractions::default(), 2).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            s.test.iter().for_each(|&i| tested[i] += 1);
        }
        assert!(tested.iter().all(|&c| c == 1));
    }

    #[test]
    fn split_proportions_are_roughly_seventy_ten_twenty() {
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let folds = make_folds(&labels, 5, 0).unwrap();
        let s = fold_split(&folds, &labels, 0, &SplitFractions::default(), 0).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (70, 10, 20));
    }

    #[test]
    fn too_few_bags() {
        assert!(make_folds(&[true, false], 5, 0).is_err());
    }
}
