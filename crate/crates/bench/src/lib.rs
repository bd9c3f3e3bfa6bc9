//! Shared fixtures for the benchmarks.

use reval_core::experiment::{Dataset, RunConfig};
use reval_core::model::Model;
use reval_core::pgd::NeuralModels;

/// The toy noisy-reversal setup with `overrides` applied.
pub fn toy(overrides: &[&str]) -> (RunConfig, Dataset) {
    let cfg = RunConfig::default()
        .with_overrides(overrides)
        .expect("valid overrides");
    let data = Dataset::for_config(&cfg).expect("toy corpus");
    (cfg, data)
}

/// Freshly initialised models for `cfg`.
pub fn models(cfg: &RunConfig, data: &Dataset) -> NeuralModels {
    let model =
        Model::new(cfg.model_config(64), data.vocab.clone(), cfg.seeds().init).expect("model");
    NeuralModels::new(model, cfg.optimizer(), cfg.clip, cfg.batch)
}
