//! Fixtures shared by the benchmarks in `benches/`.

use lvit_core::{Lvit, ModelConfig, RngState, Tensor};

/// Standard-normal tensor of the given shape.
pub fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Default-sized model with a fixed initialization.
pub fn default_model(seed: u64) -> Lvit {
    Lvit::init(ModelConfig::default(), &mut RngState::new(seed)).expect("default config is valid")
}

/// `n` random 48x48 images.
pub fn random_images(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = RngState::new(seed);
    (0..n).map(|_| random_tensor(&[48, 48], &mut rng)).collect()
}
