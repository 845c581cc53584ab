use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CdsError, Result};
use crate::numerics::Tensor;

/// Named parameter tensors plus same-shaped gradient slots. A `BTreeMap`
/// keeps iteration order deterministic, which the optimizer and the
/// checkpoint format both rely on.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CdsError::Contract(format!("duplicate parameter {name}")));
        }
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| CdsError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| CdsError::Contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| CdsError::Contract(format!("no gradient slot for {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Deterministic (sorted) parameter names.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (name, value) in &self.entries {
            self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        }
    }

    /// Accumulate into the named gradient slot.
    pub fn add_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let value = self.get(name)?;
        if value.shape() != delta.shape() {
            return Err(CdsError::Dimension(format!(
                "gradient shape {:?} does not match parameter {name} shape {:?}",
                delta.shape(),
                value.shape()
            )));
        }
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| CdsError::Contract(format!("no gradient slot for {name}")))?;
        for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Scale every gradient in place (batch averaging, clipping).
    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
