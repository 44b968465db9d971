//! Named parameter tensors with deterministic iteration order.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Precision, Tensor, TensorId};
use crate::optim::{adam_step, AdamHyper, AdamState};

/// All trainable tensors of a model, keyed by dotted path names.
/// BTreeMap keeps every walk over the store in one global order, which
/// the optimizer, checkpoints, and tests all rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(CoreError::Config(format!("duplicate parameter {}", name)));
        }
        t.requires_grad = true;
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| CoreError::Missing(format!("parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| CoreError::Missing(format!("parameter {}", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }

    /// Register every parameter whose name passes the filter as a graph
    /// leaf. The returned map drives gradient harvesting.
    pub fn bind_where<F: Fn(&str) -> bool>(
        &self,
        g: &mut Graph,
        keep: F,
    ) -> BTreeMap<String, TensorId> {
        let mut binding = BTreeMap::new();
        for (name, t) in &self.map {
            if keep(name) {
                binding.insert(name.clone(), g.leaf(t));
            }
        }
        binding
    }

    pub fn bind_all(&self, g: &mut Graph) -> BTreeMap<String, TensorId> {
        self.bind_where(g, |_| true)
    }

    /// Pull leaf gradients out of a finished graph, adding into each
    /// tensor's accumulator. Parameters backward never reached stay as
    /// they are.
    pub fn harvest_grads(&mut self, g: &Graph, binding: &BTreeMap<String, TensorId>) {
        for (name, &id) in binding {
            if let Some(grad) = g.grad(id) {
                if let Some(t) = self.map.get_mut(name) {
                    t.accumulate_grad(grad);
                }
            }
        }
    }

    /// Adam update over every parameter holding a gradient. Returns the
    /// number of tensors updated. Missing optimizer state is created on
    /// first touch.
    pub fn apply_adam(
        &mut self,
        states: &mut BTreeMap<String, AdamState>,
        hp: &AdamHyper,
        lr: f64,
        step: u64,
        precision: Precision,
    ) -> Result<usize> {
        let mut updated = 0;
        for (name, t) in self.map.iter_mut() {
            let Some(grad) = t.grad.take() else { continue };
            let state = states
                .entry(name.clone())
                .or_insert_with(|| AdamState::zeros(t.numel()));
            adam_step(&mut t.data, &grad, state, hp, lr, step, precision)
                .map_err(|e| match e {
                    CoreError::NanGradient(d) => {
                        CoreError::NanGradient(format!("{} in {}", d, name))
                    }
                    other => other,
                })?;
            updated += 1;
        }
        Ok(updated)
    }
}
