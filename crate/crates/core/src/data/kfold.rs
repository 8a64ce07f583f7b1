use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled k-fold partition of `0..n`. Fold sizes differ by at most one;
/// indices within each fold are sorted.
pub fn split_kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, DataError> {
    if k < 2 {
        return Err(DataError::Config(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(DataError::Config(format!("k = {k} exceeds n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut test = order[start..start + len].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_folds_of_eighteen() {
        let folds = split_kfold(180, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        assert!(folds.iter().all(|f| f.test.len() == 18 && f.train.len() == 162));
    }

    #[test]
    fn leave_one_out() {
        let folds = split_kfold(10, 10, 0).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 1));
    }

    #[test]
    fn rejects_bad_k() {
        assert!(split_kfold(5, 6, 0).is_err());
        assert!(split_kfold(5, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_indices(n in 2usize..200, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k = 2 + ((n - 2) as f64 * k_frac) as usize;
            let folds = split_kfold(n, k, seed).unwrap();
            let mut seen = vec![0u32; n];
            for f in &folds {
                for &i in &f.test { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.test.len(), n);
                prop_assert!(f.test.iter().all(|i| f.train.binary_search(i).is_err()));
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(split_kfold(n, k, seed).unwrap(), folds);
        }
    }
}
