//! Deterministic RNG stream derivation.
//!
//! Every stochastic operation in a run draws from a stream derived from
//! (master seed, domain tag, index). Streams never depend on thread
//! scheduling or batch chunking, so runs are bit-reproducible and the
//! rayon and sequential paths produce identical output.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Tensor;

/// Stream domains; values are stable across versions (they feed the seed hash).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init = 1,
    Forward = 2,
    Backward = 3,
    MalaNoise = 4,
    MalaAccept = 5,
    BufferDraw = 6,
    Eval = 7,
    ExactSampler = 8,
    LsInit = 9,
    Misc = 10,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from (seed, domain, index).
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = splitmix64(
        seed ^ splitmix64(domain as u64) ^ splitmix64(index.wrapping_mul(0x9e3779b97f4a7c15)),
    );
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Draw a (rows x cols) standard-normal tensor.
pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a1 = normal_tensor(&mut stream(7, Domain::Forward, 3), 2, 4);
        let a2 = normal_tensor(&mut stream(7, Domain::Forward, 3), 2, 4);
        assert_eq!(a1, a2);
        let b = normal_tensor(&mut stream(7, Domain::Forward, 4), 2, 4);
        assert_ne!(a1, b);
        let c = normal_tensor(&mut stream(7, Domain::Backward, 3), 2, 4);
        assert_ne!(a1, c);
    }
}
