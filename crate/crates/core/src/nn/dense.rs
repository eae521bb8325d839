use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Gradients, TensorId, TensorStore};

/// Fully connected layer `y = x Wᵀ + b` on `(N, in)` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: TensorId,
    pub bias: TensorId,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
    weight: Array2<f64>,
}

impl Dense {
    pub fn init<R: Rng>(name: &str, in_features: usize, out_features: usize, params: &mut TensorStore, rng: &mut R) -> Self {
        let std = 1.0 / (in_features as f64).sqrt();
        let w = Array2::from_shape_simple_fn((out_features, in_features), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            weight: params.push(format!("{name}.weight"), w.into_dyn()),
            bias: params.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_features]))),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Array2<f64>, params: &TensorStore) -> (Array2<f64>, DenseCache) {
        let w = params.get(self.weight).view().into_dimensionality::<Ix2>().expect("2-d weight").to_owned();
        let b = params.get(self.bias).view().into_dimensionality::<Ix1>().expect("1-d bias");
        let y = x.dot(&w.t()) + &b;
        (
            y,
            DenseCache {
                input: x.clone(),
                weight: w,
            },
        )
    }

    pub fn backward(&self, cache: &DenseCache, grad_out: &Array2<f64>, grads: &mut Gradients) -> Array2<f64> {
        let gw = grad_out.t().dot(&cache.input);
        let gb: Array1<f64> = grad_out.sum_axis(Axis(0));
        grads.add_to(self.weight, &gw.into_dyn());
        grads.add_to(self.bias, &gb.into_dyn());
        grad_out.dot(&cache.weight)
    }
}
