//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmtl_core::{Tensor, TrainConfig};

pub const THREE_TASK: &str = include_str!("../../../configs/toy_three_task.toml");

pub fn three_task_config() -> TrainConfig {
    TrainConfig::from_toml(THREE_TASK).expect("bundled config parses")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Scores with heavy ties and balanced labels.
pub fn scored_pairs(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let same = rng.random_bool(0.5);
            let shift = if same { 0.3 } else { 0.0 };
            ((rng.random_range(0..200) as f64 / 200.0) + shift, same)
        })
        .unzip()
}
