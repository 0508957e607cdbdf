//! Seeded, platform-stable randomness.
//!
//! Every random draw in the crate goes through [`DetRng`], a thin wrapper over
//! ChaCha8 (`rand_chacha::ChaCha8Rng`, seeded with `seed_from_u64`). ChaCha8's
//! output stream is fixed by its definition, so replays are byte-identical on
//! every platform. The conversions layered on top are defined here rather than
//! borrowed from `rand`'s distributions so they cannot drift between versions:
//!
//! * `next_f64`: the top 53 bits of one `u64`, scaled by 2^-53, giving `[0, 1)`.
//! * `below(n)`: Lemire's multiply-shift with rejection (unbiased).
//! * `shuffle`: Fisher-Yates from the last index down, one `below` per swap.
//!
//! Seed derivation for per-client streams uses the SplitMix64 finalizer
//! ([`mix64`]), so a client's stream depends only on (experiment seed,
//! client id, round) and never on the order clients are visited.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic generator used for initialization, shuffling and sampling.
#[derive(Clone, Debug)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `pool`, chosen uniformly, returned in pool order.
    pub fn sample_sorted(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        assert!(k <= pool.len());
        let mut picked = pool.to_vec();
        // partial Fisher-Yates: the first k slots end up a uniform sample
        for i in 0..k {
            let j = i + self.below((picked.len() - i) as u64) as usize;
            picked.swap(i, j);
        }
        picked.truncate(k);
        picked.sort_unstable();
        picked
    }
}

/// SplitMix64 finalizer; a bijective 64-bit mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one client's local training in one round: `seed ^ H(client, round)`.
pub fn client_round_seed(seed: u64, client_id: u64, round: u64) -> u64 {
    seed ^ mix64(mix64(client_id) ^ round.rotate_left(32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = DetRng::new(7);
        let mut b = DetRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn floats_in_unit_interval() {
        let mut r = DetRng::new(1);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_stays_in_range_and_hits_every_value() {
        let mut r = DetRng::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = r.below(7) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = DetRng::new(11);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn sample_is_distinct_and_sorted() {
        let mut r = DetRng::new(5);
        let pool: Vec<usize> = (100..200).collect();
        let s = r.sample_sorted(&pool, 30);
        assert_eq!(s.len(), 30);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|x| pool.contains(x)));
    }

    #[test]
    fn client_seeds_differ_by_client_and_round() {
        let a = client_round_seed(42, 0, 1);
        assert_ne!(a, client_round_seed(42, 1, 1));
        assert_ne!(a, client_round_seed(42, 0, 2));
        assert_eq!(a, client_round_seed(42, 0, 1));
    }
}
