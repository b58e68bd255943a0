//! Named sub-seeds: every stage draws from `seed ^ fnv1a64(stage)`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn stable_hash(name: &str) -> u64 {
    name.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    seed ^ stable_hash(stage)
}
