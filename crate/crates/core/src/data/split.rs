use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Partition `0..n` into `k` folds after a seeded shuffle. Sizes differ by at
/// most one; the first `n % k` folds take the extra element.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("k-fold split needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + (f < extra) as usize;
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Indices outside fold `f`.
pub fn train_indices(folds: &[Vec<usize>], f: usize) -> Vec<usize> {
    let mut out: Vec<usize> = folds.iter().enumerate().filter(|(i, _)| *i != f).flat_map(|(_, v)| v.iter().copied()).collect();
    out.sort_unstable();
    out
}
