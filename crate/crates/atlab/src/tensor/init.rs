//! Weight initializers.
//!
//! Dense and convolution weights use uniform Xavier/Glorot draws scaled by
//! fan-in and fan-out; embedding tables use unit normals; biases start at
//! zero, layer-norm gains at one. All draws are seeded.

use crate::error::{Error, Result};
use crate::tensor::{rng, Tensor};

/// Uniform draw in `±sqrt(6 / (fan_in + fan_out))` for a `[fan_in, fan_out]`
/// matrix.
pub fn xavier_matrix(fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Parameter(format!("xavier_matrix: zero fan ({fan_in}, {fan_out})")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::stream(seed);
    let data = (0..fan_in * fan_out).map(|_| rng::uniform_in(&mut r, -bound, bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

/// Convolution weight in unfolded layout `[k * c_in, c_out]`, with the kernel
/// size folded into both fans: `fan_in = k * c_in`, `fan_out = k * c_out`.
pub fn xavier_conv(k: usize, c_in: usize, c_out: usize, seed: u64) -> Result<Tensor> {
    if k == 0 || c_in == 0 || c_out == 0 {
        return Err(Error::Parameter(format!("xavier_conv: zero dimension ({k}, {c_in}, {c_out})")));
    }
    let bound = (6.0 / (k * c_in + k * c_out) as f64).sqrt();
    let mut r = rng::stream(seed);
    let data = (0..k * c_in * c_out).map(|_| rng::uniform_in(&mut r, -bound, bound)).collect();
    Tensor::new(vec![k * c_in, c_out], data)
}

/// `[rows, d]` table of standard normal draws.
pub fn normal_embedding(rows: usize, d: usize, seed: u64) -> Result<Tensor> {
    if rows == 0 || d == 0 {
        return Err(Error::Parameter(format!("normal_embedding: zero dimension ({rows}, {d})")));
    }
    let mut r = rng::stream(seed);
    let data = (0..rows * d).map(|_| rng::normal(&mut r)).collect();
    Tensor::new(vec![rows, d], data)
}

/// Zero vector (biases, layer-norm shifts).
pub fn zeros_vector(d: usize) -> Tensor {
    Tensor::zeros(vec![d])
}

/// All-ones vector (layer-norm gains).
pub fn ones_vector(d: usize) -> Tensor {
    Tensor { shape: vec![d], data: vec![1.0; d], requires_grad: false, grad: None }
}

/// Constant vector (positive ReLU bias margins).
pub fn filled_vector(d: usize, value: f64) -> Tensor {
    Tensor { shape: vec![d], data: vec![value; d], requires_grad: false, grad: None }
}
