use indexmap::IndexMap;

use super::spec::{Init, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor};

/// Gradients (or any per-parameter tensors) keyed by parameter path, in
/// network order.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

/// A named weight tensor and its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Every parameter and batch-norm running statistic of one network.
///
/// `version` increases whenever a parameter value changes, which lets a
/// forward cache detect that it no longer matches the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Parameter<T>>,
    buffers: IndexMap<String, Tensor<T>>,
    version: u64,
}

impl<T: Scalar> ParamStore<T> {
    /// Seeded initialization: Kaiming-uniform weights, zero biases, unit
    /// gamma, zero beta. Running means start at 0 and variances at 1.
    pub fn init(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init);
        let mut params = IndexMap::new();
        for spec in net.parameters() {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::KaimingUniform { fan_in } => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| T::of(rng::uniform(&mut rng, -bound, bound)))
                        .collect()
                }
                Init::Zeros => vec![T::zero(); numel],
                Init::Ones => vec![T::one(); numel],
            };
            let value = Tensor::from_parts(spec.shape.clone(), data);
            let grad = value.zeros_like();
            params.insert(
                spec.path.clone(),
                Parameter {
                    name: spec.path,
                    value,
                    grad,
                },
            );
        }
        let mut buffers = IndexMap::new();
        for (path, channels) in net.buffers() {
            buffers.insert(
                format!("{path}.running_mean"),
                Tensor::from_parts(vec![channels], vec![T::zero(); channels]),
            );
            buffers.insert(
                format!("{path}.running_var"),
                Tensor::from_parts(vec![channels], vec![T::one(); channels]),
            );
        }
        ParamStore {
            params,
            buffers,
            version: 0,
        }
    }

    /// Same parameters and statistics at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let q = Parameter {
                        name: p.name.clone(),
                        value: p.value.cast(),
                        grad: p.grad.cast(),
                    };
                    (k.clone(), q)
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            version: self.version,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn get(&self, path: &str) -> Result<&Parameter<T>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(path)?.value)
    }

    /// Replaces a parameter value (same shape required).
    pub fn set_value(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))?;
        p.value.expect_same_shape(&value)?;
        p.value = value;
        self.version += 1;
        Ok(())
    }

    /// Mutable access to all parameters; counts as a modification.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.version += 1;
        self.params.values_mut()
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn set_buffer(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))?;
        slot.expect_same_shape(&value)?;
        *slot = value;
        Ok(())
    }

    /// Stores a gradient map into the parameters' gradient buffers. The map
    /// must cover exactly this store's parameters with matching shapes.
    pub fn set_grads(&mut self, grads: &GradMap<T>) -> Result<()> {
        for name in grads.keys() {
            if !self.params.contains_key(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        for (name, p) in self.params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::layer(name, "gradient missing"))?;
            p.grad.expect_same_shape(g)?;
            p.grad = g.clone();
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = p.grad.zeros_like();
        }
    }

    /// Snapshot of all gradient buffers.
    pub fn grads(&self) -> GradMap<T> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.grad.clone()))
            .collect()
    }

    /// First parameter or buffer holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params
            .iter()
            .find(|(_, p)| !p.value.is_finite())
            .map(|(k, _)| k.clone())
            .or_else(|| {
                self.buffers
                    .iter()
                    .find(|(_, t)| !t.is_finite())
                    .map(|(k, _)| k.clone())
            })
    }
}
