//! Fixtures shared by the benches.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmoe_core::experiment::prepare_examples;
use wmoe_core::model::Example;
use wmoe_core::synth::{benchmark_spec, generate, ImageSample};
use wmoe_core::{Model, RunConfig, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Balanced images of one benchmark family at the desk resolution.
pub fn samples(family: usize, n: usize, seed: u64) -> Vec<ImageSample> {
    generate(&benchmark_spec(64).families[family], 64, n, seed).expect("benchmark spec is valid")
}

/// An untrained desk model with `n` encoded training examples.
pub fn desk_model(n: usize) -> (Model, Vec<Example>) {
    let model = Model::new(RunConfig::desk()).expect("desk config is valid");
    let examples = prepare_examples(&model, &samples(0, n, 1)).expect("samples match the config");
    (model, examples)
}
