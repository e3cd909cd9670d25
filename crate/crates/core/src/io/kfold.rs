use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GediError, Result};

/// Shuffled partition into `folds` validation sets whose sizes differ by at
/// most one. Each pair is `(train, validation)`, both sorted.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(GediError::InvalidSpec("need at least 2 folds".into()));
    }
    if n < folds {
        return Err(GediError::TooFewRows { rows: n, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut start = 0;
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let mut valid = order[start..start + size].to_vec();
        valid.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        train.sort_unstable();
        out.push((train, valid));
        start += size;
    }
    Ok(out)
}
