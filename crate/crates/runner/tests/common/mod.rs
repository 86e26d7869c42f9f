#![allow(dead_code)]

use p2d_core::model::{Mode, ModelConfig};
use p2d_core::scene::SceneConfig;
use p2d_core::GridSpec;
use p2d_runner::ExperimentConfig;

/// A configuration small enough to train in well under a second.
pub fn tiny(mode: Mode, n_prev: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.mode = mode;
    c.scene = SceneConfig {
        grid: GridSpec::centered(10, 10, 1.0),
        n_prev: n_prev.max(2),
        object_count: [1, 3],
        min_separation: 2.0,
        ..SceneConfig::default()
    };
    c.model = ModelConfig {
        n_prev,
        feature_channels: 4,
        encoder_hidden: vec![4],
        head_hidden: 4,
        k: 8,
        heads: 2,
        points: 2,
        ..ModelConfig::for_scene(&c.scene)
    };
    c.train.epochs = 2;
    c.train.batch_size = 2;
    c.train.train_episodes = 4;
    c.eval.eval_episodes = 3;
    c
}
