//! Named parameter storage shared by all trainable models.

use crate::hash::Hasher;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named f64 arrays.
///
/// Registration order is part of the identity: checkpoints, hashes and
/// optimizer state all follow it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Content hash over names, shapes and raw f64 bits, in registration order.
    pub fn content_hash(&self) -> String {
        let mut h = Hasher::new();
        for (name, value) in self.iter() {
            h.update_str(name);
            h.update_array(&value.view());
        }
        h.finish_hex()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient slots parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn zeros_for(store: &ParamStore) -> Self {
        Grads { slots: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<f64>) {
        match &mut self.slots[id.0] {
            Some(existing) => *existing += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.slots[id.0].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ArrayD<f64>> {
        self.slots[id.0].as_mut()
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, factor: f64) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(other.slots.iter()) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.zip_mut_with(src, |a, b| *a += factor * b),
                    slot @ None => *slot = Some(src.mapv(|v| v * factor)),
                }
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn hash_changes_with_values() {
        let mut s = ParamStore::new();
        let id = s.register("w", ArrayD::zeros(IxDyn(&[2, 2])));
        let h0 = s.content_hash();
        s.get_mut(id)[[0, 0]] = 1.0;
        assert_ne!(h0, s.content_hash());
    }

    #[test]
    fn grads_accumulate() {
        let mut s = ParamStore::new();
        let id = s.register("w", ArrayD::zeros(IxDyn(&[2])));
        let mut g = Grads::zeros_for(&s);
        g.accumulate(id, ArrayD::from_elem(IxDyn(&[2]), 1.0));
        g.accumulate(id, ArrayD::from_elem(IxDyn(&[2]), 2.0));
        assert_eq!(g.get(id).unwrap()[[0]], 3.0);
    }
}
