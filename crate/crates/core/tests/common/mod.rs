#![allow(dead_code)]

use trajcast::data::{self, SplitFractions, TensorDataset};
use trajcast::model::HyperParams;
use trajcast::synthgen::{self, GroundTruth, SynthConfig};

/// Small split synthetic dataset for tests that train.
pub fn small_dataset(n: usize, seed: u64) -> (TensorDataset, GroundTruth) {
    let mut cfg = SynthConfig::with_dims(n, 4, 6, 3, 2);
    cfg.p_obs = 0.4;
    cfg.seed = seed;
    let (ds, gt) = synthgen::sample_dataset(&cfg).unwrap();
    (
        data::split(&ds, SplitFractions::default(), seed).unwrap(),
        gt,
    )
}

/// Cheap training settings.
pub fn quick_hparams(seed: u64) -> HyperParams {
    HyperParams {
        latent_dim: 4,
        epochs: 3,
        batch_size: 16,
        learning_rate: 1e-2,
        seed,
        ..HyperParams::default()
    }
}
