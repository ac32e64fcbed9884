use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Seeded shuffle followed by a train/val/test partition.
///
/// Part sizes are `floor(ratio * n)` for train and val; test takes the rest.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    if items.is_empty() {
        return Err(Error::invalid("cannot split an empty list"));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be in [0,1] and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = items.len();
    let n_train = ((a * n as f64) + 1e-9).floor() as usize;
    let n_val = (((b * n as f64) + 1e-9).floor() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn sizes_for_ten() {
        let items: Vec<u32> = (0..10).collect();
        assert_eq!(split(&items, (0.8, 0.1, 0.1), 1).unwrap().sizes(), (8, 1, 1));
        assert_eq!(split(&items, (1.0, 0.0, 0.0), 1).unwrap().sizes(), (10, 0, 0));
    }

    #[test]
    fn deterministic_by_seed() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(split(&items, (0.6, 0.2, 0.2), 9).unwrap(), split(&items, (0.6, 0.2, 0.2), 9).unwrap());
        assert_ne!(split(&items, (0.6, 0.2, 0.2), 9).unwrap(), split(&items, (0.6, 0.2, 0.2), 10).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split::<u8>(&[], (1.0, 0.0, 0.0), 0).is_err());
        assert!(split(&[1], (0.5, 0.2, 0.2), 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_covers_input(n in 1usize..200, a in 0.0f64..1.0, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let b = (1.0 - a) * frac;
            let c = 1.0 - a - b;
            let items: Vec<usize> = (0..n).collect();
            let s = split(&items, (a, b, c), seed).unwrap();
            let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        }
    }
}
