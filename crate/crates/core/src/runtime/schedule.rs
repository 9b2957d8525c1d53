use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Completion order of `k` workers at iteration `t`: a uniform permutation
/// drawn from stream `t` of a ChaCha8 generator seeded with `seed`. The
/// first `N` entries are the workers whose results the manager accepts.
pub fn deterministic_schedule(seed: u64, t: u64, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    order
}

/// Completion order pinned to `0, 1, …, k−1` so that `U_t = {0..N}`.
pub fn forced_split_schedule(k: usize) -> Vec<usize> {
    (0..k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_a_permutation() {
        for t in 0..20 {
            let a = deterministic_schedule(42, t, 9);
            assert_eq!(a, deterministic_schedule(42, t, 9));
            let mut sorted = a.clone();
            sorted.sort();
            assert_eq!(sorted, (0..9).collect::<Vec<_>>());
        }
        assert_ne!(deterministic_schedule(42, 1, 20), deterministic_schedule(42, 2, 20));
        assert_ne!(deterministic_schedule(1, 1, 20), deterministic_schedule(2, 1, 20));
    }
}
