//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use regdif_core::simulation::generate_dataset;
use regdif_core::{Dataset, DifCondition, TrueModel};

/// Table 2 data of `n` persons under `condition`.
pub fn table2(n: usize, condition: DifCondition, seed: u64) -> Dataset {
    generate_dataset(n, &TrueModel::new(condition), &mut ChaCha20Rng::seed_from_u64(seed)).expect("valid design")
}
