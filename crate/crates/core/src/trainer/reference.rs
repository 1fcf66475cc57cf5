//! The desk-scale setup used for trainability checks.

use crate::model::BaseConfig;
use crate::peft::PeftHyperparams;

use super::{TaskSpec, TrainConfig};

/// Two layers, width 16, two heads, an 8-symbol vocabulary. Base seed 0.
pub fn reference_base_config() -> BaseConfig {
    BaseConfig::new(2, 16, 2, 8)
}

/// 64 copy sequences of length 6.
pub fn reference_task() -> TaskSpec {
    TaskSpec::copy(8, 6, 64, 1)
}

/// 500 Adam steps, batch 16, lr 0.05.
pub fn reference_train_config() -> TrainConfig {
    TrainConfig {
        steps: 500,
        batch_size: 16,
        learning_rate: 0.05,
        ..TrainConfig::default()
    }
}

/// One budget for every technique: n=8, d_h=8, r=4, d_t=4, N=2.
pub fn reference_hyperparams() -> PeftHyperparams {
    PeftHyperparams {
        n_virtual_tokens: 8,
        bottleneck_dim: 8,
        lora_rank: 4,
        tiny_dim: 4,
        kron_order: 2,
        ..PeftHyperparams::default()
    }
}
