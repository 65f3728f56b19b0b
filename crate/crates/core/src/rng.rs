//! Counter-based random streams.
//!
//! Every consumer asks for the stream `(seed, purpose, index)`, so results do
//! not depend on the order in which independent jobs run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::DenseMatrix;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod purpose {
    pub const TEACHER: u64 = 1;
    pub const INPUTS_A: u64 = 2;
    pub const INPUTS_B: u64 = 3;
    pub const LABEL_NOISE_A: u64 = 4;
    pub const LABEL_NOISE_B: u64 = 5;
    pub const CALIBRATION: u64 = 6;
    pub const MODEL_INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const PROBE: u64 = 12;
    pub const SWEEP_DATA: u64 = 20;
    pub const SWEEP_PRETRAIN: u64 = 21;
    pub const SWEEP_FINETUNE: u64 = 22;
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

/// Independent generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix64(purpose.wrapping_mul(0x1000_0000_01B3) ^ mix64(index)));
    rng
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
