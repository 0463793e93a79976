use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded random partition of `patch_ids` into folds numbered `1..=n_folds`
/// whose sizes differ by at most one.
pub fn make_folds(patch_ids: &[String], n_folds: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if n_folds < 2 {
        return Err(Error::Invalid(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut ids: Vec<&String> = patch_ids.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() != patch_ids.len() {
        return Err(Error::Invalid("duplicate patch ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % n_folds + 1))
        .collect())
}
