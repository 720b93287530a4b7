//! Deterministic inputs shared by the benchmark targets.

use styleforge_core::ops::{ConvSpec, Padding};
use styleforge_core::rng::SplitMix64;
use styleforge_core::{FlowField, Shape, Tensor};

pub fn random_tensor(seed: u64, shape: Shape, bound: f64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.symmetric(bound) as f32)
}

/// An image-like tensor with values in [0, 1].
pub fn random_frame(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(Shape::new(1, 3, height, width), |_, _, _, _| rng.next_f64() as f32)
}

/// Weights scaled like a fan-in initialisation.
pub fn conv_spec(seed: u64, cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvSpec<f32> {
    let bound = (1.0 / (cin * kernel * kernel) as f64).sqrt();
    let weight = random_tensor(seed, Shape::new(cout, cin, kernel, kernel), bound);
    let bias = random_tensor(seed ^ 0x9e37, Shape::vector(cout), bound);
    ConvSpec::new(weight, bias, stride, Padding::Reflect).expect("valid conv spec")
}

/// A smooth rotational field with sub-pixel displacements everywhere.
pub fn swirl_flow(height: usize, width: usize, strength: f32) -> FlowField {
    let (cy, cx) = (height as f32 / 2.0, width as f32 / 2.0);
    let scale = strength / cx.max(cy).max(1.0);
    FlowField::from_fn(height, width, |y, x| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        (-dy * scale + 0.37, dx * scale - 0.21)
    })
    .expect("finite flow")
}
