//! Counter-keyed random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(seed, step, role, index)`, so the values a consumer sees never depend on
//! how many draws other consumers made or in which order they ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named purposes for randomness; the discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Init = 1,
    Data = 2,
    Timestep = 3,
    Noise = 4,
    SampleNoise = 5,
    Prompt = 6,
    Holdout = 7,
    Probe = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator for one `(seed, step, role, index)` coordinate.
pub fn stream(seed: u64, step: u64, role: Role, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [
        splitmix(seed),
        splitmix(step ^ 0xA5A5_A5A5_0000_0001),
        splitmix(role as u64),
        splitmix(index.wrapping_mul(0x2545_F491_4F6C_DD1D)),
    ];
    let mut acc = 0u64;
    for (chunk, w) in key.chunks_mut(8).zip(words) {
        acc = splitmix(acc ^ w);
        chunk.copy_from_slice(&acc.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
