//! Shared fixtures for the criterion benchmarks under `benches/`.

use neurodecode::denoiser::DenoiserConfig;
use neurodecode::model::{Model, ModelConfig};
use neurodecode::parcel::{BrainSample, ParcelAtlas};
use neurodecode::synth::{generate_synthetic_dataset, random_stimuli, synthetic_brain, SyntheticAtlasConfig};

/// The small model used throughout the test suite.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        token_dim: 32,
        shared_mapper: false,
        denoiser: DenoiserConfig { image_size: 32, base_channels: 16, depth: 2, heads: 4, head_dim: 8, time_dim: 64 },
    }
}

/// A synthetic atlas with `n` responses to random stimuli.
pub fn synthetic_samples(n: usize) -> (ParcelAtlas, Vec<BrainSample>) {
    let (atlas, spec) = synthetic_brain(&SyntheticAtlasConfig::default(), 0.5, 1).expect("synthetic brain");
    let stimuli = random_stimuli(n, 2, 0);
    let (samples, _) = generate_synthetic_dataset(&spec, &atlas, &stimuli, 1).expect("synthetic responses");
    (atlas, samples)
}

pub fn desk_model(atlas: &ParcelAtlas) -> Model {
    Model::init(desk_model_config(), atlas, 0).expect("model init")
}
