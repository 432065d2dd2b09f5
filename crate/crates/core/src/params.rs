//! Named learnable parameters with gradient accumulators.

use std::collections::BTreeMap;

use crate::graph::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A learnable tensor plus its gradient accumulator.
///
/// Invariant: `grad` always has the same shape as `value`.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// All learnable state of a model, keyed by unique name. Iteration order is
/// the name order, so walks over the store are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    /// Registers a parameter. Each name may be registered exactly once.
    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(EngineError::DuplicateParameter(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.map.insert(name.to_string(), Parameter { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.map.iter_mut()
    }

    /// Adds a backward pass's gradient map into the accumulators.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .map
                .get_mut(name)
                .ok_or_else(|| EngineError::UnknownParameter(name.clone()))?;
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            for v in p.grad.data_mut() {
                *v = T::ZERO;
            }
        }
    }

    /// Global L2 norm over all gradient accumulators.
    pub fn grad_norm(&self) -> T {
        let mut s = T::ZERO;
        for p in self.map.values() {
            for &v in p.grad.data() {
                s += v * v;
            }
        }
        s.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|p| p.value.all_finite())
    }

    /// Precision-converting copy (used to rebuild an f32 training store in
    /// f64 for verification).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let map = self
            .map
            .iter()
            .map(|(k, p)| (k.clone(), Parameter { value: p.value.cast(), grad: p.grad.cast() }))
            .collect();
        ParamStore { map }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.register("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grad_norm_over_all_parameters() {
        let mut s = ParamStore::<f64>::new();
        s.register("a", Tensor::zeros(&[1])).unwrap();
        s.register("b", Tensor::zeros(&[2])).unwrap();
        s.get_mut("a").unwrap().grad.data_mut()[0] = 3.0;
        s.get_mut("b").unwrap().grad.data_mut()[0] = 4.0;
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }
}
