use std::sync::Arc;

use crate::graph::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to (groups get their own learning rate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Group(pub u8);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Debug, Clone)]
pub struct BufferEntry<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> BufferEntry<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

/// Named trainable parameters and non-trainable buffers of a model.
///
/// Values are shared (`Arc`) so a [`crate::Graph`] can borrow them without
/// copying; updates copy-on-write only while a graph still holds a reference.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamEntry<T>>,
    buffers: Vec<BufferEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.params.push(ParamEntry {
            name: name.into(),
            group,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(BufferEntry {
            name: name.into(),
            value: Arc::new(value),
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[ParamEntry<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferEntry<T>] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub(crate) fn buffer_arc(&self, id: BufferId) -> Arc<Tensor<T>> {
        Arc::clone(&self.buffers[id.0].value)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor<T>) {
        self.buffers[id.0].value = Arc::new(value);
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(BufferId, Tensor<T>)>) {
        for (id, v) in updates {
            self.set_buffer(id, v);
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars per group.
    pub fn num_trainable_in(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Ordered (name, tensor) pairs of parameters followed by buffers.
    pub fn named_tensors(&self) -> Vec<(String, bool, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), true, p.value.as_ref()))
            .chain(self.buffers.iter().map(|b| (b.name.clone(), false, b.value.as_ref())))
            .collect()
    }

    /// Overwrites a parameter or buffer by name; shapes must match.
    pub fn load_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            &mut p.value
        } else if let Some(b) = self.buffers.iter_mut().find(|b| b.name == name) {
            &mut b.value
        } else {
            return Err(TensorError::Missing(name.to_string()));
        };
        if slot.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "tensor '{}' has shape {:?}, stored {:?}",
                name,
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Parameters whose gradient is missing or identically zero.
    pub fn dead_params(&self, grads: &Gradients<T>) -> Vec<String> {
        self.param_ids()
            .filter(|&id| match grads.get(id) {
                None => true,
                Some(g) => g.data().iter().all(|v| *v == T::zero()),
            })
            .map(|id| self.name(id).to_string())
            .collect()
    }
}
