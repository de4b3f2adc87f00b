use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index sets of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation cut into `floor(N a / s)`, `floor(N b / s)` and the
/// remainder, where `s = a + b + c`.
pub fn split_dataset(n: usize, ratio: [usize; 3], seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(Error::Config(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let total: usize = ratio.iter().sum();
    if total == 0 || ratio.contains(&0) {
        return Err(Error::Config(format!("invalid split ratio {ratio:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * ratio[0] / total;
    let n_val = n * ratio[1] / total;
    Ok(Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// `k` (train, val) assignments over `pool`: a seeded shuffle cut into `k`
/// contiguous folds whose sizes differ by at most one.
pub fn kfold_plan(pool: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if pool.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot fill {k} folds",
            pool.len()
        )));
    }
    let mut order = pool.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val = order[start..start + len].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        folds.push((train, val));
        start += len;
    }
    Ok(folds)
}
