use std::collections::BTreeMap;

use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gradients keyed by tensor name within one [`LayerParams`].
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// A named group of tensors with matching gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub name: String,
    pub trainable: bool,
    tensors: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(name: impl Into<String>, trainable: bool) -> Self {
        Self {
            name: name.into(),
            trainable,
            tensors: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor<T>) {
        let key = key.into();
        let (r, c) = tensor.shape();
        self.grads.insert(key.clone(), Tensor::zeros(r, c));
        self.tensors.insert(key, tensor);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::config(format!("{} has no tensor `{key}`", self.name)))
    }

    /// Direct mutable access, used by loaders and numeric probes. Training
    /// goes through [`LayerParams::update`], which refuses frozen layers.
    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor<T>> {
        let name = &self.name;
        self.tensors
            .get_mut(key)
            .ok_or_else(|| Error::config(format!("{name} has no tensor `{key}`")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.grads
    }

    pub fn grad(&self, key: &str) -> Option<&Tensor<T>> {
        self.grads.get(key)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds `grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (k, g) in grads {
            let acc = self
                .grads
                .get_mut(k)
                .ok_or_else(|| Error::config(format!("{} has no tensor `{k}`", self.name)))?;
            acc.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Applies `f(key, value, grad)` to every tensor. Frozen layers are rejected.
    pub fn update(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>, &Tensor<T>)) -> Result<()> {
        if !self.trainable {
            return Err(Error::config(format!("refusing to update frozen layer {}", self.name)));
        }
        for (k, t) in self.tensors.iter_mut() {
            let g = &self.grads[k];
            f(k, t, g);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            name: self.name.clone(),
            trainable: self.trainable,
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            grads: self.grads.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

/// Gaussian matrix scaled by `scale`.
pub fn randn<T: Scalar>(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| lit::<T>(rng.next_gaussian() * scale))
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Inserts `{prefix}.weight` (out × in, scaled 1/√in) and a zero `{prefix}.bias`.
pub fn init_linear<T: Scalar>(p: &mut LayerParams<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    let scale = 1.0 / (d_in as f64).sqrt();
    p.insert(format!("{prefix}.weight"), randn(d_out, d_in, scale, rng));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(1, d_out));
}

/// Inserts a unit `{prefix}.gamma` and zero `{prefix}.beta`.
pub fn init_layer_norm<T: Scalar>(p: &mut LayerParams<T>, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::filled(1, d, T::one()));
    p.insert(format!("{prefix}.beta"), Tensor::zeros(1, d));
}
