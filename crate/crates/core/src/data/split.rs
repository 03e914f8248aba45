use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Minimum number of non-excluded samples needed for a split.
pub const MIN_SPLIT_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Sorted sample ids.
    pub train: Vec<String>,
    /// Sorted sample ids.
    pub validation: Vec<String>,
}

fn id_hash(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic train/validation partition of the manifest's samples.
///
/// Samples are ranked by a seeded hash of their id and the lowest
/// `round(fraction * N)` go to validation, so membership depends only on
/// ids and seed, never on record order.
pub fn split(manifest: &DatasetManifest) -> Result<Split> {
    let ids: Vec<String> = manifest.samples().into_iter().map(|s| s.id).collect();
    if ids.len() < MIN_SPLIT_SAMPLES {
        return Err(Error::Config(format!(
            "need at least {MIN_SPLIT_SAMPLES} non-excluded samples to split, have {}",
            ids.len()
        )));
    }
    let fraction = manifest.validation_fraction;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation_fraction {fraction} not in (0, 1)")));
    }
    let n_val = (fraction * ids.len() as f64).round() as usize;
    let mut ranked: Vec<(u64, String)> = ids
        .into_iter()
        .map(|id| (id_hash(manifest.split_seed, &id), id))
        .collect();
    ranked.sort();
    let mut validation: Vec<String> = ranked[..n_val].iter().map(|(_, id)| id.clone()).collect();
    let mut train: Vec<String> = ranked[n_val..].iter().map(|(_, id)| id.clone()).collect();
    validation.sort();
    train.sort();
    Ok(Split { train, validation })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled index batches for one epoch, deterministic in `(seed, epoch)`.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of `items` for one epoch; every item is visited exactly once.
pub fn batch_iterator<'a, I: Clone>(
    items: &'a [I],
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Vec<I>> + 'a> {
    let order = batch_order(items.len(), batch_size, shuffle_seed, epoch)?;
    Ok(order
        .into_iter()
        .map(move |batch| batch.into_iter().map(|i| items[i].clone()).collect()))
}
