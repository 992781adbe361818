//! Shared fixtures for the criterion benchmarks.

use cocl_core::augment::AugConfig;
use cocl_core::losses::AugmentedBatch;
use cocl_core::model::{ModelConfig, ModelState};
use cocl_core::tensor::Tensor;

pub fn bench_model(seed: u64) -> ModelState {
    ModelState::init(
        ModelConfig {
            input_dim: 256,
            encoder_hidden: vec![64],
            embed_dim: 16,
            proj_hidden: 32,
            proj_dim: 16,
        },
        seed,
    )
    .expect("valid config")
}

/// A deterministic 2N x 256 two-view batch with 3 classes.
pub fn bench_batch(pairs: usize) -> AugmentedBatch {
    let rows = 2 * pairs;
    let mut state = 0x2545f4914f6cdd1du64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let x = Tensor::matrix(rows, 256, (0..rows * 256).map(|_| next()).collect())
        .expect("shape matches");
    AugmentedBatch {
        x,
        labels: (0..rows).map(|i| ((i / 2) % 3) as u32).collect(),
        anchor_mask: (0..rows).map(|i| i / 2 != 0).collect(),
        origin: (0..rows).map(|i| i / 2).collect(),
    }
}

pub fn bench_aug_config() -> AugConfig {
    AugConfig::new((16, 16))
}
