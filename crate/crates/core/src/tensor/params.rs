use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of an entry in a [`LayerParams`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    tensor: Tensor<T>,
    trainable: bool,
}

/// Named parameter store in insertion order.
///
/// Trainable entries always carry a gradient accumulator of identical shape.
/// Non-trainable entries (batch-norm running statistics) carry none.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Real> Default for LayerParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> LayerParams<T> {
    pub fn new() -> Self {
        LayerParams {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        tensor.zero_grad();
        self.insert_entry(name.into(), tensor, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        tensor.grad = None;
        self.insert_entry(name.into(), tensor, false)
    }

    fn insert_entry(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let (id, _) = self.entries.insert_full(name, Entry { tensor, trainable });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).unwrap().0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Adds `delta` into the gradient accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, delta: &[T]) {
        let entry = &mut self.entries[id.0];
        debug_assert!(entry.trainable);
        let grad = entry.tensor.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            e.tensor.zero_grad();
        }
    }

    /// `(id, name, tensor)` for every entry, in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (name, e))| (ParamId(i), name.as_str(), &e.tensor))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .values()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }
}
