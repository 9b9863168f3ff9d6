use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AutodiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stable handle to a slot in a [`ParamStore`]. Slots are never reused, so a
/// handle stays valid (or dangling, after removal) for the store's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every trainable tensor of a model.
///
/// `version` is bumped by each optimizer step so callers can check that two
/// forward passes saw the same parameter set.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    slots: Vec<Option<Param<T>>>,
    version: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            version: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.slots.push(Some(Param {
            name: name.into(),
            value,
        }));
        ParamId(self.slots.len() - 1)
    }

    /// Inserts at a specific slot; used when restoring checkpoints.
    pub fn insert_at(&mut self, id: ParamId, name: impl Into<String>, value: Tensor<T>) {
        if self.slots.len() <= id.0 {
            self.slots.resize_with(id.0 + 1, || None);
        }
        self.slots[id.0] = Some(Param {
            name: name.into(),
            value,
        });
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<T>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        matches!(self.slots.get(id.0), Some(Some(_)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.param(id).value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        match self.slots.get_mut(id.0) {
            Some(Some(p)) => &mut p.value,
            _ => panic!("parameter slot {} is empty", id.0),
        }
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        match self.slots.get(id.0) {
            Some(Some(p)) => p,
            _ => panic!("parameter slot {} is empty", id.0),
        }
    }

    /// Live parameters in slot order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|p| p.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// Gradient buffers aligned with the slots of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        let slots = store
            .slots
            .iter()
            .map(|p| p.as_ref().map(|p| vec![T::zero(); p.value.numel()]))
            .collect();
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<T>> {
        self.slots.get_mut(id.0).and_then(|g| g.as_mut())
    }

    /// `self[id] += scale * grad`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[T], scale: T) -> Result<()> {
        let buf = self
            .slots
            .get_mut(id.0)
            .and_then(|g| g.as_mut())
            .ok_or_else(|| AutodiffError::Usage(format!("no gradient slot for parameter {}", id.0)))?;
        if buf.len() != grad.len() {
            return shape_err("Grads::accumulate", &[buf.len()], &[grad.len()]);
        }
        for (b, g) in buf.iter_mut().zip(grad) {
            *b = *b + scale * *g;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.slots.iter_mut().flatten()
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| *g * *g)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * factor;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for g in self.iter_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removed_slots_are_not_reused() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let b = store.add("b", Tensor::zeros(&[3]));
        store.remove(a);
        let c = store.add("c", Tensor::zeros(&[1]));
        assert_ne!(a, c);
        assert!(!store.contains(a));
        assert_eq!(store.get(b).numel(), 3);
        assert_eq!(store.len(), 2);
        let grads = Grads::zeros_like(&store);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(c).unwrap().len(), 1);
    }
}
