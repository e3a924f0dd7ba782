//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use atom_core::heads::HeadsConfig;
use atom_core::model::ModelConfig;
use atom_core::train::{StageConfig, TrainConfig};
use atom_core::triplane::GeneratorConfig;

/// A model small enough for many training steps inside a test.
pub fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.generator = GeneratorConfig { channels: 4, resolution: 8, blocks: 1, heads: 2 };
    m.heads = HeadsConfig { hidden: 16, octaves: 2, ..HeadsConfig::default() };
    m
}

/// Training config with few, cheap samples per step.
pub fn tiny_train(seen: Vec<String>) -> TrainConfig {
    let mut t = TrainConfig { seen, ..TrainConfig::default() };
    t.stage1 = StageConfig { iterations: 10, resolution: 8, samples: 8, batch: 2, ..StageConfig::stage1() };
    t.stage2 = StageConfig { iterations: 10, resolution: 16, batch: 2, ..StageConfig::stage2() };
    t.grid_resolution = 8;
    t
}
