//! Spectral normalization of weight matrices by power iteration.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower bound on the singular value estimate; a zero matrix stays zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Result of one power-iteration step on a weight matrix.
#[derive(Debug, Clone)]
pub struct SpectralStep {
    pub normalized: Array2<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub sigma: f64,
}

fn unit_or(vec: Array1<f64>, fallback: ArrayView1<f64>) -> Array1<f64> {
    let norm = vec.dot(&vec).sqrt();
    if norm > 0.0 && norm.is_finite() {
        vec / norm
    } else {
        fallback.to_owned()
    }
}

/// Advances the persistent left vector `u` by one power-iteration step.
///
/// Returns the updated `(u, v)` pair; a vector whose update has zero norm
/// keeps its previous value.
pub fn power_iteration(
    weight: ArrayView2<f64>,
    u: ArrayView1<f64>,
    v_prev: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let v = unit_or(weight.t().dot(&u), v_prev);
    let u_next = unit_or(weight.dot(&v), u);
    (u_next, v)
}

/// `uᵀ W v`, floored at [`SIGMA_FLOOR`].
pub fn sigma_estimate(weight: ArrayView2<f64>, u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    u.dot(&weight.dot(&v)).max(SIGMA_FLOOR)
}

/// One power-iteration step followed by division by the estimated largest
/// singular value.
///
/// `weight` is the `(out) × (in·kh·kw)` matrix view of a kernel and `u` the
/// persistent unit vector of length `out`.
pub fn spectral_normalize(weight: ArrayView2<f64>, u: ArrayView1<f64>) -> SpectralStep {
    let v0 = Array1::from_elem(weight.ncols(), 1.0 / (weight.ncols() as f64).sqrt());
    let (u, v) = power_iteration(weight, u, v0.view());
    let sigma = sigma_estimate(weight, u.view(), v.view());
    SpectralStep {
        normalized: &weight / sigma,
        u,
        v,
        sigma,
    }
}

/// Gradient of a loss w.r.t. the raw weight, given the gradient w.r.t. the
/// normalized weight `W̄ = W / σ̂` with `u`, `v` held fixed.
pub fn spectral_backward(
    grad_normalized: ArrayView2<f64>,
    normalized: ArrayView2<f64>,
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    sigma: f64,
) -> Array2<f64> {
    let inner: f64 = grad_normalized
        .iter()
        .zip(normalized.iter())
        .map(|(g, w)| g * w)
        .sum();
    let mut out = grad_normalized.to_owned();
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            out[[i, j]] -= inner * ui * vj;
        }
    }
    out / sigma
}
