//! Shared fixtures for the criterion benches.

use efa_core::{Model, ModelConfig, Shape, Tensor};

/// Deterministic, non-constant input of the given shape.
pub fn pattern(shape: impl Into<Shape>) -> Tensor {
    Tensor::from_fn(shape, |n, c, h, w| {
        let k = (n * 7 + c * 13 + h * 5 + w * 3) % 17;
        k as f32 / 8.0 - 1.0
    })
}

/// Toy-sized detector and one matching input.
pub fn toy_model(input_size: usize) -> (Model, Tensor) {
    let model = Model::new(&ModelConfig::toy(input_size, 0.25)).expect("toy config is valid");
    let x = pattern(model.input_shape(1));
    (model, x)
}
