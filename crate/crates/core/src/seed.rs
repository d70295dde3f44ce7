//! Seed derivation. Every random decision in a run draws from a generator
//! seeded by `(run_seed, step, stream)`, so worker scheduling order cannot
//! change what any job sees.

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(32) ^ 0x5851_F42D_4C95_7F2D)
}

/// Independent random streams within one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Operator = 1,
    Knowledge = 2,
    Engine = 3,
    Noise = 4,
}

pub fn derive_seed(run_seed: u64, step: u64, stream: Stream) -> u64 {
    mix(mix(run_seed, step), stream as u64)
}
