//! Deterministic seed derivation.
//!
//! Every random stream in an experiment is keyed by a path of integers below
//! a master seed, e.g. `(master, TRIAL, trial_index)` or
//! `(trial_seed, MEMBER, capacity)`. Derivation is a SplitMix64 fold, so a
//! sub-seed depends only on its path and never on execution order.

pub const TRIAL: u64 = 0x7472_6961_6c00_0001;
pub const MEMBER: u64 = 0x6d65_6d62_6572_0002;
pub const SHOT: u64 = 0x7368_6f74_0000_0003;
pub const INIT: u64 = 0x696e_6974_0000_0004;
pub const SPLIT: u64 = 0x7370_6c69_7400_0005;
pub const MAP: u64 = 0x6d61_7000_0000_0006;
pub const EPOCH: u64 = 0x6570_6f63_6800_0007;
pub const PRETRAIN: u64 = 0x7072_6574_7200_0008;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
