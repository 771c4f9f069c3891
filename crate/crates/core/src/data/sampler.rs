//! Epoch-seeded patient batching. Views of one patient always share a batch.

use rand::seq::SliceRandom;

use crate::rng;

/// Shuffles `patients` with a stream keyed by `(seed, epoch)` and cuts them
/// into batches of at most `patients_per_batch`.
pub fn batch_sampler(patients: &[usize], patients_per_batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(patients_per_batch > 0, "batch size must be positive");
    let mut order = patients.to_vec();
    order.shuffle(&mut rng::stream(seed, "batches", &[epoch as u64]));
    order.chunks(patients_per_batch).map(<[usize]>::to_vec).collect()
}
