//! Reproducible random streams.
//!
//! Every task gets its own ChaCha12 generator whose 256-bit seed is derived
//! from the master seed and a path of indices, e.g. `[cell, replication]`
//! or `[cell, replication, chain]`. The derivation folds each path element
//! into a 128-bit state:
//!
//! ```text
//! s0     = mix(master_seed)
//! s(k+1) = mix(s(k) ^ ((index_k + 1) * GOLDEN))
//! seed   = le_bytes(mix(s ^ 1)) || le_bytes(mix(s ^ 2))
//! ```
//!
//! where `mix` is a 128-bit xor-shift/multiply finalizer. Streams therefore
//! depend only on (seed, path), never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

const GOLDEN: u128 = 0x9e37_79b9_7f4a_7c15_f39c_c060_5ced_c835;
const M1: u128 = 0xd605_bbb5_8c8a_bbb8_f2e5_8a3e_3b9d_0c25;
const M2: u128 = 0x2360_ed05_1fc6_5da4_4385_df64_9fcc_f645;

fn mix(mut x: u128) -> u128 {
    x ^= x >> 64;
    x = x.wrapping_mul(M1);
    x ^= x >> 59;
    x = x.wrapping_mul(M2);
    x ^= x >> 64;
    x
}

/// 128-bit key for `(master_seed, path)`.
pub fn stream_key(master_seed: u64, path: &[u64]) -> u128 {
    let mut s = mix(master_seed as u128);
    for &ix in path {
        s = mix(s ^ (ix as u128).wrapping_add(1).wrapping_mul(GOLDEN));
    }
    s
}

/// Independent generator for `(master_seed, path)`.
pub fn stream(master_seed: u64, path: &[u64]) -> Stream {
    let s = stream_key(master_seed, path);
    let mut seed = [0u8; 32];
    seed[..16].copy_from_slice(&mix(s ^ 1).to_le_bytes());
    seed[16..].copy_from_slice(&mix(s ^ 2).to_le_bytes());
    ChaCha12Rng::from_seed(seed)
}
