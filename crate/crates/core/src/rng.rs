//! Splittable RNG streams keyed by (seed, iteration, purpose tag).
//!
//! Replicates and sub-tasks each get an independent stream derived from the
//! run seed, so iterations can run in parallel and any single iteration can
//! be regenerated bit-identically in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the key material, then splitmix64-expanded into a 256-bit seed.
fn mix_key(seed: u64, iteration: u64, purpose: &str) -> [u8; 32] {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(&seed.to_le_bytes());
    feed(&iteration.to_le_bytes());
    feed(purpose.as_bytes());

    let mut out = [0u8; 32];
    let mut state = h;
    for chunk in out.chunks_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    out
}

/// Independent stream for one (iteration, purpose) pair of a run.
pub fn stream(seed: u64, iteration: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(mix_key(seed, iteration, purpose))
}
