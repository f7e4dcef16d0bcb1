use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Train/validation/test partition of sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles `ids` with `seed` and slices them by `fractions` (train, val);
/// the test part takes the rest. Train and validation sizes are rounded to
/// the nearest integer.
pub fn split_dataset(ids: &[String], seed: u64, fractions: (f64, f64)) -> DatasetSplit {
    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let n_train = ((fractions.0 * n as f64).round() as usize).min(n);
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    DatasetSplit {
        seed,
        train: order,
        val,
        test,
    }
}

/// The 76 / 12 / 12 percent proportions.
pub const DEFAULT_FRACTIONS: (f64, f64) = (0.76, 0.12);
