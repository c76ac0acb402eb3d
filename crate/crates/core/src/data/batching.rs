use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::rng::Rng;

/// A seeded permutation of `0..n` cut into batches; every index appears in
/// exactly one batch and only the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `k` indices drawn uniformly from `0..n` with replacement.
pub fn sample_with_replacement(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn batches_cover_every_index_once(n in 0usize..300, b in 1usize..70, seed in any::<u64>()) {
            let batches = epoch_batches(n, b, &mut rng::seeded(seed));
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for batch in batches.iter().rev().skip(1) {
                prop_assert_eq!(batch.len(), b);
            }
            prop_assert_eq!(batches, epoch_batches(n, b, &mut rng::seeded(seed)));
        }
    }

    #[test]
    fn sampling_stays_in_range() {
        let s = sample_with_replacement(5, 1000, &mut rng::seeded(1));
        assert!(s.iter().all(|&i| i < 5));
        assert!((0..5).all(|i| s.contains(&i)));
    }
}
