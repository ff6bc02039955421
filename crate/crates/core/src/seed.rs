//! Named sub-seeds fanned out from one master seed.

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `name` under `master`. FNV-1a over the name, then
/// mixed with the master seed; independent of platform and Rust version.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(master ^ mix64(h))
}

/// The sub-seeds logged for every run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub master: u64,
    pub data: u64,
    pub init: u64,
    pub mask: u64,
    pub probe: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            data: derive_seed(master, "data"),
            init: derive_seed(master, "init"),
            mask: derive_seed(master, "mask"),
            probe: derive_seed(master, "probe"),
        }
    }
}
