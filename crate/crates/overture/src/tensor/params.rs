//! Named parameter tensors with paired gradient slots, plus the
//! adaptive-moment optimizer used for training.

use super::{Scalar, Tensor};
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Named parameter tensors; every parameter has a gradient slot of identical
/// shape. Iteration order is registration order, which makes training and
/// serialization deterministic.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::Input(format!("duplicate parameter name {name}")));
        }
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value_at(&self, idx: usize) -> &Tensor<T> {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.values[idx]
    }

    pub fn grad_at(&self, idx: usize) -> &Tensor<T> {
        &self.grads[idx]
    }

    pub fn grad_at_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.grads[idx]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.value_at(self.index_of(name)?))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.grad_at(self.index_of(name)?))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.fill(T::zero());
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    /// Add an indexed gradient vector (from `backward_to_vec`) into the slots.
    pub fn accumulate_grad_vec(&mut self, grads: &[Option<Tensor<T>>]) {
        debug_assert_eq!(grads.len(), self.grads.len());
        for (slot, g) in self.grads.iter_mut().zip(grads.iter()) {
            if let Some(g) = g {
                slot.add_assign(g);
            }
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for g in self.grads.iter_mut() {
            g.scale_assign(c);
        }
    }

    /// Convert parameter precision (gradients reset, step preserved).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            out.register(name, value.cast::<U>()).expect("unique names");
        }
        out.step = self.step;
        out
    }
}

/// Adaptive-moment estimation hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(store.value_at(i).shape().to_vec()))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(store.value_at(i).shape().to_vec()))
            .collect();
        Adam { cfg, m, v }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for i in 0..store.len() {
            if !store.grad_at(i).all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {}",
                    store.name_at(i)
                )));
            }
        }
        store.bump_step();
        let t = store.step_count();
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::one() - T::from_f64(self.cfg.beta1.powi(t as i32));
        let bc2 = T::one() - T::from_f64(self.cfg.beta2.powi(t as i32));
        for i in 0..store.len() {
            let g = self.m[i].numel();
            debug_assert_eq!(g, store.grad_at(i).numel());
            for j in 0..g {
                let grad = store.grad_at(i).data()[j];
                let m = &mut self.m[i].data_mut()[j];
                *m = b1 * *m + (T::one() - b1) * grad;
                let v = &mut self.v[i].data_mut()[j];
                *v = b2 * *v + (T::one() - b2) * grad * grad;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                store.value_at_mut(i).data_mut()[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
