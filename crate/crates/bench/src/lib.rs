//! Shared fixtures for the criterion benchmarks.

use subskill_vae::synthdata::{generate_dataset, PointMassConfig, Task};
use subskill_vae::{Dataset, ModelBundle, ModelConfig};

pub fn dataset(demos_per_skill: usize) -> Dataset {
    generate_dataset(&Task::DiagWiggle.manifest(demos_per_skill, 0), &PointMassConfig::default())
        .expect("built-in task is valid")
}

pub fn bundle(aux_posterior: bool) -> ModelBundle {
    let config = ModelConfig {
        aux_posterior,
        ..ModelConfig::default()
    };
    ModelBundle::init(&config, 0).expect("default config is valid")
}
