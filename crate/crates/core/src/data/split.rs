use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CoreSegError, Result};

/// Scene-level train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Scene counts per split: floor each share, lift empty splits to one scene,
/// then give the remainder to train.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(CoreSegError::invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CoreSegError::invalid(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    if n < 3 {
        return Err(CoreSegError::invalid(format!(
            "{n} scenes cannot fill three splits"
        )));
    }
    let mut counts = fractions.map(|f| ((f * n as f64) + 1e-9).floor() as usize);
    for c in counts.iter_mut() {
        if *c == 0 {
            *c = 1;
        }
    }
    let assigned: usize = counts.iter().sum();
    if assigned <= n {
        counts[0] += n - assigned;
    } else {
        // Lifting empty splits overshot; take back from the largest split.
        for _ in 0..assigned - n {
            let largest = (0..3).max_by_key(|&i| (counts[i], 3 - i)).expect("three splits");
            counts[largest] -= 1;
        }
    }
    Ok(counts)
}

/// Shuffles scenes with `seed` and partitions them by [`split_counts`].
pub fn split_dataset<T>(scenes: Vec<T>, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit<T>> {
    let [n_train, n_val, _] = split_counts(scenes.len(), fractions)?;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = scenes.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter().map(|&i| slots[i].take().expect("each scene used once")).collect()
    };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_scenes_sixty_twenty_twenty() {
        assert_eq!(split_counts(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
    }

    #[test]
    fn three_scenes_one_each() {
        assert_eq!(split_counts(3, [0.34, 0.33, 0.33]).unwrap(), [1, 1, 1]);
    }

    #[test]
    fn remainder_goes_to_train() {
        assert_eq!(split_counts(12, [0.6, 0.2, 0.2]).unwrap(), [8, 2, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(split_counts(2, [0.5, 0.25, 0.25]).is_err());
        assert!(split_counts(10, [0.5, 0.5, 0.0]).is_err());
        assert!(split_counts(10, [0.5, 0.3, 0.3]).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let a = split_dataset((0..20).collect(), [0.6, 0.2, 0.2], 11).unwrap();
        let b = split_dataset((0..20).collect(), [0.6, 0.2, 0.2], 11).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<i32> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }
}
