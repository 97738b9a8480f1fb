use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ImageSample;
use crate::error::{Error, Result};

/// One cross-validation fold. Id lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Splits samples into `k` folds by group so that related cases stay together.
///
/// Groups are shuffled with `seed` and dealt round-robin, so every case is
/// validated exactly once.
pub fn make_folds(samples: &[ImageSample], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::config("folds", format!("need at least 2 folds, got {k}")));
    }
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.group).or_default().push(&s.case_id);
    }
    if groups.len() < k {
        return Err(Error::config(
            "folds",
            format!("{} groups cannot fill {k} folds", groups.len()),
        ));
    }
    let mut order: Vec<&str> = groups.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, g) in order.iter().enumerate() {
        val[i % k].extend(groups[g].iter().map(|s| s.to_string()));
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(fold_index, mut val_ids)| {
            val_ids.sort();
            let mut train_ids: Vec<String> = samples
                .iter()
                .filter(|s| val_ids.binary_search(&s.case_id).is_err())
                .map(|s| s.case_id.clone())
                .collect();
            train_ids.sort();
            FoldSplit {
                fold_index,
                train_ids,
                val_ids,
            }
        })
        .collect())
}
