//! Whole-day dataset splits.

use super::{PipeError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Disjoint day-index assignment covering every day exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaySplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DaySplit {
    pub fn contains(&self, day: usize) -> &'static str {
        if self.test.contains(&day) {
            "test"
        } else if self.validation.contains(&day) {
            "validation"
        } else {
            "train"
        }
    }
}

/// Assigns whole days by seeded shuffle: 20% test, then 10% of the
/// remainder (at least one day) for validation, rest for training.
pub fn split_days(day_count: usize, seed: u64) -> Result<DaySplit> {
    if day_count < 5 {
        return Err(PipeError::TooFewDays {
            need: 5,
            have: day_count,
        });
    }
    let mut order: Vec<usize> = (0..day_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_test = day_count / 5;
    let remainder = day_count - n_test;
    let n_val = (remainder / 10).max(1);

    let mut split = DaySplit {
        test: order[..n_test].to_vec(),
        validation: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    };
    split.test.sort_unstable();
    split.validation.sort_unstable();
    split.train.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ninety_days_like_the_published_split() {
        let s = split_days(90, 0).unwrap();
        assert_eq!(s.test.len(), 18);
        assert_eq!(s.validation.len(), 7);
        assert_eq!(s.train.len(), 65);
    }

    #[test]
    fn five_days_minimum_split() {
        let s = split_days(5, 1).unwrap();
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.validation.len(), 1);
        assert_eq!(s.train.len(), 3);
    }

    #[test]
    fn too_few_days_rejected() {
        assert!(matches!(
            split_days(4, 0),
            Err(PipeError::TooFewDays { .. })
        ));
    }

    #[test]
    fn same_seed_same_assignment() {
        assert_eq!(split_days(30, 42).unwrap(), split_days(30, 42).unwrap());
        assert_ne!(split_days(30, 42).unwrap(), split_days(30, 43).unwrap());
    }

    proptest! {
        #[test]
        fn splits_partition_the_day_set(n in 5usize..200, seed in any::<u64>()) {
            let s = split_days(n, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter()
                .chain(&s.validation)
                .chain(&s.test)
                .copied()
                .collect();
            all.sort_unstable();
            let expected: Vec<usize> = (0..n).collect();
            prop_assert_eq!(all, expected); // union = all days, no duplicates
            prop_assert!(!s.validation.is_empty());
            prop_assert!(!s.train.is_empty());
        }
    }
}
