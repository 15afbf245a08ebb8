use rand::seq::SliceRandom;
use rand::RngCore;

use crate::error::{Error, Result};

/// One epoch of shuffled position batches.
#[derive(Clone, Debug)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    cursor: usize,
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let remaining = self.order.len() - self.cursor;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let batch = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        Some(batch)
    }
}

/// Seeded permutation of `0..len` cut into batches of `batch_size`.
pub fn batches(len: usize, batch_size: usize, rng: &mut dyn RngCore, drop_last: bool) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if drop_last && batch_size > len {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds dataset size {len} with drop_last set"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(BatchIter { order, batch_size, drop_last, cursor: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn drop_last_keeps_full_batches_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all: Vec<_> = batches(10, 3, &mut rng, true).unwrap().collect();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|b| b.len() == 3));
        let ids: BTreeSet<_> = all.iter().flatten().collect();
        assert_eq!(ids.len(), 9);
    }

    #[test]
    fn same_seed_same_sequence() {
        let a: Vec<_> = batches(17, 4, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap().collect();
        let b: Vec<_> = batches(17, 4, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_batch_with_drop_last_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(batches(3, 4, &mut rng, true), Err(Error::Config(_))));
        assert!(matches!(batches(3, 0, &mut rng, false), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #[test]
        fn epoch_without_drop_last_visits_every_id_once(len in 1usize..200, bs in 1usize..64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen: Vec<usize> = batches(len, bs, &mut rng, false).unwrap().flatten().collect();
            seen.sort_unstable();
            proptest::prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        }
    }
}
