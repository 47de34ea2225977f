//! Seeded random models and inputs for property suites.

use crate::nn::{Activation, Mlp};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Xavier weights scaled by `gain`, small random biases.
pub fn random_mlp(dims: &[usize], hidden: Activation, seed: u64, gain: f64) -> Mlp {
    let mut m = Mlp::xavier_uniform_hidden(dims, hidden, seed).expect("valid dims");
    let mut rng = Stream::new(seed).split(0xB1A5);
    for layer in m.layers_mut() {
        layer.weights.scale(gain);
        layer.bias.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
    }
    m
}

/// Depth in `1..=max_depth` layers, hidden widths in `2..=max_width`.
pub fn random_dims(rng: &mut Stream, inputs: usize, classes: usize, max_depth: usize, max_width: usize) -> Vec<usize> {
    let depth = 1 + (rng.uniform() * max_depth as f64) as usize;
    let mut dims = vec![inputs];
    for _ in 1..depth.min(max_depth) {
        dims.push(2 + (rng.uniform() * (max_width - 1) as f64) as usize);
    }
    dims.push(classes);
    dims
}

pub fn normal_batch(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("sized")
}
