//! Minimal f64 layer library with explicit forward caches and hand-written
//! backward passes. Tensors are NCHW.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod params;
pub mod spectral;

use ndarray::{concatenate, Array4, Axis};
use serde::{Deserialize, Serialize};

pub use conv::{Conv2d, ConvTranspose2d, SpectralKernel};
pub use dense::Dense;
pub use norm::BatchNorm2d;
pub use params::{Gradients, TensorId, TensorStore};
pub use spectral::{spectral_normalize, SpectralStep};

/// Batch-norm behavior: batch statistics while training, running statistics
/// at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the activation output.
pub fn relu_backward(output: &Array4<f64>, grad: &Array4<f64>) -> Array4<f64> {
    let mut g = grad.clone();
    ndarray::Zip::from(&mut g)
        .and(output)
        .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
    g
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Channel-wise concatenation.
pub fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("matching batch and spatial dims")
}

/// Splits a gradient at a channel offset (inverse of a two-way concat).
pub fn split_channels(x: &Array4<f64>, at: usize) -> (Array4<f64>, Array4<f64>) {
    let (a, b) = x.view().split_at(Axis(1), at);
    (a.to_owned(), b.to_owned())
}
