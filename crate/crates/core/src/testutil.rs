use std::sync::OnceLock;

use crate::checkpoint::Checkpoint;
use crate::diffusion::{train, ModelConfig, ToyDataset, TrainConfig, UpdateRule};

/// Briefly trained 8×16 model with the default 50-step schedule. Shared by
/// unit tests that need stable rollouts.
pub(crate) fn tiny_ckpt() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let ds = ToyDataset::default();
        let cfg = ModelConfig {
            d_model: 8,
            d_hidden: 16,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            steps: 300,
            batch_size: 64,
            learning_rate: 0.02,
            update_rule: UpdateRule::Plain,
            seed: 4,
            validation_size: 64,
        };
        let (model, report) = train(&ds, cfg, &tc).unwrap();
        Checkpoint::new(model, ds).with_training(report)
    })
}
