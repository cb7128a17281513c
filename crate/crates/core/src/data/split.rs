use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::StDataset;
use crate::error::{Error, Result};

/// Assignment of every spot to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Spot indices held out in `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Spot indices used for training when `fold` is held out, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin fold assignment.
pub fn kfold_split(ds: &StDataset, k: usize, seed: u64) -> Result<FoldSplit> {
    kfold_indices(ds.len(), k, seed)
}

pub(crate) fn kfold_indices(m: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || k > m {
        return Err(Error::invalid(format!("k = {k} folds needs 2 ≤ k ≤ M = {m}")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; m];
    for (pos, &spot) in order.iter().enumerate() {
        assignments[spot] = pos % k;
    }
    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_and_uneven_sizes() {
        assert_eq!(kfold_indices(10, 5, 0).unwrap().fold_sizes(), vec![2; 5]);
        assert_eq!(kfold_indices(10, 3, 0).unwrap().fold_sizes(), vec![4, 3, 3]);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(kfold_indices(37, 4, 9).unwrap(), kfold_indices(37, 4, 9).unwrap());
        assert_ne!(kfold_indices(37, 4, 9).unwrap(), kfold_indices(37, 4, 10).unwrap());
    }

    #[test]
    fn out_of_range_k() {
        assert!(kfold_indices(5, 1, 0).is_err());
        assert!(kfold_indices(5, 6, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_the_spots(m in 2usize..200, kq in 0usize..1000, seed in any::<u64>()) {
            let k = 2 + kq % (m - 1);
            let split = kfold_indices(m, k, seed).unwrap();
            let mut seen = vec![0; m];
            for f in 0..k {
                let test = split.test_indices(f);
                prop_assert!(!test.is_empty());
                for i in test {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes = split.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
