//! Shared fixtures for the benchmarks.

use slotfill::harness::{gen_corpus, RunConfig, Task};
use slotfill::slotting::Sample;
use slotfill::{Model, ModelConfig};

/// The toy model configuration used by the harness.
pub fn toy_config() -> ModelConfig {
    RunConfig::toy(Task::Copy).model
}

pub fn toy_model(seed: u64) -> Model<f32> {
    Model::init(toy_config(), seed).expect("toy config is valid")
}

/// A handful of copy-task prompts.
pub fn copy_samples(n: usize) -> Vec<Sample> {
    let cfg = RunConfig::toy(Task::Copy);
    gen_corpus(&cfg.task, &cfg.model, n, 7).expect("toy task fits the toy model")
}
