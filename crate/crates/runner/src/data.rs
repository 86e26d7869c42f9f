//! Deterministic train and evaluation episode sets.

use p2d_core::scene::{generate_episode, Episode, SceneConfig};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Seed of episode `index` of a split. Train and eval seeds never collide
/// for indices below 2^31.
pub fn episode_seed(data_seed: u64, split: Split, index: usize) -> u64 {
    let base = data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) & !((1u64 << 32) - 1);
    let split_bit = match split {
        Split::Train => 0,
        Split::Eval => 1u64 << 31,
    };
    base | split_bit | index as u64
}

pub fn generate_split(scene: &SceneConfig, data_seed: u64, split: Split, count: usize) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| Ok(generate_episode(scene, episode_seed(data_seed, split, i))?))
        .collect()
}

/// The scene configuration with pixel noise and occlusion dropout removed.
pub fn noiseless(scene: &SceneConfig) -> SceneConfig {
    SceneConfig {
        noise_sigma: 0.0,
        dropout_prob: 0.0,
        ..scene.clone()
    }
}
