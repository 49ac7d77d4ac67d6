//! Shared fixtures for the benchmarks.

use irrcnn_core::arch::{build_model, ArchSpec, Model};
use irrcnn_core::init::scaled_uniform_model;
use irrcnn_core::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform(-1, 1) tensor from a fixed seed.
pub fn random_tensor<T: Element>(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// A scaled-uniform initialised model.
pub fn model<T: Element>(arch: &ArchSpec, seed: u64) -> Model<T> {
    let mut model = build_model(arch).expect("valid architecture");
    scaled_uniform_model(&mut model, &mut ChaCha8Rng::seed_from_u64(seed));
    model
}
