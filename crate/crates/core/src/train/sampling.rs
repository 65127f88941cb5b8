use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{Activity, SyncedSample, N_CLASSES};

/// Exactly `k` samples of every class, drawn without replacement under
/// `seed`. The subset keeps the input order.
pub fn few_shot_sample(train: &[SyncedSample], k: usize, seed: u64) -> Result<Vec<SyncedSample>> {
    if k == 0 {
        return Err(Error::arg("shots must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; train.len()];
    for class in 0..N_CLASSES {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train[i].label.index() == class).collect();
        if idx.len() < k {
            return Err(Error::arg(format!(
                "class '{}' has {} sample(s), fewer than {k} shots",
                Activity::ALL[class].name(),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    Ok(train.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect())
}

/// Error unless every class occurs at least once.
pub fn require_all_classes(samples: &[SyncedSample]) -> Result<()> {
    let counts = crate::signal::class_counts(samples);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::arg(format!(
            "labelled set has no '{}' samples; all {N_CLASSES} classes are required",
            Activity::ALL[c].name()
        )));
    }
    Ok(())
}
