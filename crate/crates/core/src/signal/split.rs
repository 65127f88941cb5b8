use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spectrogram::{SyncedSample, N_CLASSES};
use crate::error::{Error, Result};

/// Seeded random train/test partition.
///
/// With `stratified`, each class is shuffled and split on its own, keeping
/// `round(train_fraction * n_c)` samples (at least one on each side). Output
/// order follows the input order within each side.
pub fn split_dataset(
    samples: &[SyncedSample],
    train_fraction: f64,
    stratified: bool,
    seed: u64,
) -> Result<(Vec<SyncedSample>, Vec<SyncedSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; samples.len()];
    if stratified {
        for class in 0..N_CLASSES {
            let mut idx: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].label.index() == class)
                .collect();
            if idx.is_empty() {
                continue;
            }
            if idx.len() < 2 {
                return Err(Error::arg(format!(
                    "class {class} has {} sample(s); stratified split needs >= 2",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
            for &i in &idx[..n_train] {
                is_train[i] = true;
            }
        }
        if samples.is_empty() {
            return Err(Error::arg("cannot split an empty dataset"));
        }
    } else {
        if samples.len() < 2 {
            return Err(Error::arg("need at least 2 samples to split"));
        }
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, t) in samples.iter().zip(is_train) {
        if t {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}
