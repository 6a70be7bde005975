//! Deterministic derivation of independent RNG seeds.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose of a derived stream; distinct purposes never share a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    Images = 3,
    Shift = 4,
    Split = 5,
}

/// Seed for `(global, purpose, index)`, e.g. the mini-batch stream of silo `index`.
pub fn derive(global: u64, stream: Stream, index: u64) -> u64 {
    mix64(mix64(global ^ mix64(stream as u64)) ^ index)
}
