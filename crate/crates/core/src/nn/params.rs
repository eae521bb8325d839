use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

/// Handle to one tensor inside a [`TensorStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
///
/// Networks keep their trainable weights in one store and their non-trained
/// state (batch-norm running statistics, spectral-norm vectors) in another.
/// Layers only hold [`TensorId`]s, so gradients and optimizer moments can be
/// laid out as parallel vectors indexed the same way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> TensorId {
        self.names.push(name.into());
        self.values.push(value);
        TensorId(self.values.len() - 1)
    }

    pub fn get(&self, id: TensorId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .values
                .iter()
                .map(|v| ArrayD::zeros(IxDyn(v.shape())))
                .collect(),
        }
    }

    /// Replaces every value, keeping names. Shapes must match.
    pub fn assign(&mut self, values: Vec<ArrayD<f64>>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!(
                "expected {} tensors, got {}",
                self.values.len(),
                values.len()
            ));
        }
        for (i, (dst, src)) in self.values.iter().zip(values.iter()).enumerate() {
            if dst.shape() != src.shape() {
                return Err(format!(
                    "tensor `{}` shape {:?} does not match {:?}",
                    self.names[i],
                    src.shape(),
                    dst.shape()
                ));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Flat view of a single scalar, used by finite-difference checks.
    pub fn scalar_mut(&mut self, tensor: usize, flat_index: usize) -> &mut f64 {
        let t = &mut self.values[tensor];
        &mut t.as_slice_mut().expect("stored tensors are contiguous")[flat_index]
    }
}

/// Gradient accumulators, parallel to a [`TensorStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn add_to(&mut self, id: TensorId, grad: &ArrayD<f64>) {
        let dst = &mut self.tensors[id.0];
        Zip::from(dst).and(grad).for_each(|d, &g| *d += g);
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|g| g * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            Zip::from(a).and(b).for_each(|a, &b| *a += b);
        }
    }

    pub fn get(&self, id: TensorId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
