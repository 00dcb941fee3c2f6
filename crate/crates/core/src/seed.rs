//! Named sub-seeds derived from a single run seed.

/// Stage names used across the pipeline.
pub const SPLIT: &str = "split";
pub const SYNTH: &str = "synth";
pub const STAGE1_INIT: &str = "stage1.init";
pub const STAGE1_TRAIN: &str = "stage1.train";
pub const FUSION_INIT: &str = "fusion.init";
pub const FUSION_TRAIN: &str = "fusion.train";
pub const PROXY: &str = "proxy";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable sub-seed for `name` under `master`.
pub fn derive(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a(name))
}

/// Sub-seed for the `index`-th repetition of a step (epoch, batch, ...).
pub fn derive_indexed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(splitmix64(index)))
}
