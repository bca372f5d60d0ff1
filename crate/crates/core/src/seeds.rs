//! Deterministic seed derivation, so every (run, epoch, slice) gets its own
//! independent stream without sharing a mutable RNG.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_0f_91a6_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Mask seed for a training sample in a given epoch.
pub fn train_mask_seed(run_seed: u64, epoch: usize, slice_index: usize) -> u64 {
    derive(&[run_seed, 1, epoch as u64, slice_index as u64])
}

/// Fixed mask seed for evaluating a slice; independent of any run seed.
pub fn eval_mask_seed(slice_id: &str, acceleration: usize) -> u64 {
    let mut parts = vec![2, acceleration as u64];
    parts.extend(slice_id.bytes().map(u64::from));
    derive(&parts)
}
