use std::collections::HashMap;

use crate::graphcore::tensor::Tensor;
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    grad: Tensor<S>,
    trainable: bool,
}

/// Named tensors with persistent gradient accumulators.
///
/// Non-trainable entries (batch-norm running statistics) live here too so a
/// checkpoint captures the whole model state, but the optimizer skips them.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S> {
    entries: Vec<Entry<S>>,
    by_name: HashMap<String, usize>,
    populated: bool,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            populated: false,
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        trainable: bool,
    ) -> Result<ParamId, GraphError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GraphError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces a value in place; the shape fixed at creation cannot change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<(), GraphError> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(GraphError::Shape {
                op: "set_value",
                detail: format!(
                    "parameter {} has shape {:?}, got {:?}",
                    entry.name,
                    entry.value.shape(),
                    value.shape()
                ),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<S>, &Tensor<S>) {
        let entry = &mut self.entries[id.0];
        (&mut entry.value, &entry.grad)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<S>) {
        self.entries[id.0].grad.add_assign(grad);
        self.populated = true;
    }

    pub(crate) fn mark_populated(&mut self) {
        self.populated = true;
    }

    /// True once a backward sweep has been accumulated since the last [`zero_grads`](Self::zero_grads).
    pub fn has_gradients(&self) -> bool {
        self.populated
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
        self.populated = false;
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.add("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[3]), true),
            Err(GraphError::DuplicateParam(_))
        ));
    }

    #[test]
    fn shapes_are_immutable() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.set_value(id, Tensor::zeros(&[3])).is_err());
        assert!(store.set_value(id, Tensor::full(&[2], 1.0)).is_ok());
        assert_eq!(store.value(id).data(), &[1.0, 1.0]);
    }
}
