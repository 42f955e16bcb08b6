//! Fixed input sets shared across the toolchain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rasp::RaspConfig;

/// Size of the probe used by the filters.
pub const FILTER_PROBE_SIZE: usize = 64;
/// Size of the probe used for functional fingerprints and equivalence.
pub const FUNCTION_PROBE_SIZE: usize = 1000;

const FILTER_PROBE_SEED: u64 = 0x5eed_0064;
const FUNCTION_PROBE_SEED: u64 = 0x5eed_1000;

/// `n` random inputs stratified by length: lengths `1..=max_seq_len` get
/// `n / max_seq_len` inputs each, and the shortest lengths take the remainder.
pub fn stratified_inputs(cfg: &RaspConfig, n: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = cfg.max_seq_len;
    (0..lengths)
        .flat_map(|l| {
            let count = n / lengths + usize::from(l < n % lengths);
            std::iter::repeat_n(l + 1, count)
        })
        .map(|len| (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
        .collect()
}

pub fn filter_probe(cfg: &RaspConfig) -> Vec<Vec<u8>> {
    stratified_inputs(cfg, FILTER_PROBE_SIZE, FILTER_PROBE_SEED)
}

pub fn function_probe(cfg: &RaspConfig) -> Vec<Vec<u8>> {
    function_probe_of_size(cfg, FUNCTION_PROBE_SIZE)
}

pub fn function_probe_of_size(cfg: &RaspConfig, n: usize) -> Vec<Vec<u8>> {
    stratified_inputs(cfg, n, FUNCTION_PROBE_SEED)
}
